#include "palm/http.hpp"

#include <sys/socket.h>

#include <charconv>

#include <httplib.h>

namespace palm::service {

namespace {

using httplib::Request;
using httplib::Response;

constexpr auto kHeartbeat = std::chrono::seconds(15);

int status_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::Authentication: return 401;
    case ErrorKind::Authorization: return 403;
    case ErrorKind::NotFound: return 404;
    case ErrorKind::Conflict: return 409;
    default: return 400;
  }
}

void send_json(Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename F>
void guarded(Response& res, F&& body) {
  try {
    body();
  } catch (const BatchError& e) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& [row, msg] : e.rows()) rows.push_back({{"row", row}, {"error", msg}});
    send_json(res, 400, {{"error", "validation"}, {"message", e.what()}, {"errors", rows}});
  } catch (const SubscriptionError& e) {
    send_json(res, 403, {{"error", "authorization"}, {"message", e.what()}, {"device_ids", e.device_ids()}});
  } catch (const Error& e) {
    send_json(res, status_for(e.kind()), {{"error", to_string(e.kind())}, {"message", e.what()}});
  } catch (const nlohmann::json::exception& e) {
    send_json(res, 400, {{"error", "validation"}, {"message", e.what()}});
  } catch (const std::exception& e) {
    send_json(res, 500, {{"error", "internal"}, {"message", e.what()}});
  }
}

std::string bearer(const Request& req) {
  const auto h = req.get_header_value("Authorization");
  constexpr std::string_view prefix = "Bearer ";
  if (h.size() > prefix.size() && std::string_view(h).starts_with(prefix)) return h.substr(prefix.size());
  return {};
}

nlohmann::json body_json(const Request& req) {
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::Validation, "request body is not valid JSON");
  }
}

std::optional<Timestamp> time_param(const Request& req, const std::string& key) {
  if (!req.has_param(key)) return std::nullopt;
  return parse_timestamp(req.get_param_value(key));
}

Timestamp required_time(const nlohmann::json& j, const std::string& key) {
  if (!j.contains(key)) throw Error(ErrorKind::Validation, "missing '" + key + "'");
  return parse_timestamp(j.at(key).get<std::string>());
}

// Rows may be posted bare or wrapped as {"<key>": [...]}.
nlohmann::json rows_of(const nlohmann::json& body, const char* key) {
  if (body.is_object() && body.contains(key)) return body.at(key);
  return body;
}

DeviceRecord device_from_request(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorKind::Validation, "device must be a JSON object");
  DeviceRecord d;
  d.device_id = j.at("device_id").get<std::string>();
  d.farm_id = j.at("farm_id").get<std::string>();
  d.cluster_id = j.value("cluster_id", std::string{});
  d.latitude = j.at("latitude").get<double>();
  d.longitude = j.at("longitude").get<double>();
  d.sensor_placement = placement_from_string(j.value("sensor_placement", std::string{"inside"}));
  d.sensors = j.value("sensors", std::vector<std::string>{"accelerometer"});
  return d;
}

}  // namespace

HttpServer::HttpServer(Service& service) : service_(service), server_(std::make_unique<httplib::Server>()) {
  // Exclusive bind so a busy port is reported rather than shared.
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  server_->new_task_queue = [] { return new httplib::ThreadPool(32); };
  routes();
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    port_ = server_->bind_to_any_port(host);
  } else {
    port_ = server_->bind_to_port(host, port) ? port : -1;
  }
  if (port_ < 0) throw Error(ErrorKind::Io, "cannot bind " + host + ":" + std::to_string(port));
  return port_;
}

void HttpServer::serve() { server_->listen_after_bind(); }

void HttpServer::start() {
  thread_ = std::thread([this] { serve(); });
  server_->wait_until_ready();
}

void HttpServer::stop() {
  service_.close_streams();
  if (server_->is_running()) server_->stop();
  if (thread_.joinable()) thread_.join();
}

void HttpServer::routes() {
  auto& svc = service_;
  auto& s = *server_;

  s.Get("/health", [](const Request&, Response& res) { send_json(res, 200, {{"status", "ok"}}); });

  s.Post("/auth/login", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      const auto j = body_json(req);
      const auto user = j.contains("user_id") ? j.at("user_id").get<std::string>() : j.value("username", std::string{});
      send_json(res, 200, svc.login(user, j.value("password", std::string{})));
    });
  });

  s.Get("/farms", [&svc](const Request& req, Response& res) {
    guarded(res, [&] { send_json(res, 200, svc.list_farms(bearer(req))); });
  });

  s.Get(R"(/farms/([^/]+)/overview)", [&svc](const Request& req, Response& res) {
    guarded(res, [&] { send_json(res, 200, svc.farm_overview(bearer(req), req.matches[1])); });
  });

  s.Get("/devices", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      std::optional<std::string> farm;
      if (req.has_param("farm_id")) farm = req.get_param_value("farm_id");
      send_json(res, 200, svc.list_devices(bearer(req), farm));
    });
  });

  s.Post("/devices", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      const auto token = bearer(req);
      DeviceRecord d;
      try {
        d = device_from_request(body_json(req));
      } catch (const std::exception&) {
        // Still one audit entry per mutating call, even for unreadable bodies.
        d.device_id = "?";
        svc.create_device(token, d);
      }
      send_json(res, 201, svc.create_device(token, d));
    });
  });

  s.Get(R"(/devices/([^/]+))", [&svc](const Request& req, Response& res) {
    guarded(res, [&] { send_json(res, 200, svc.get_device(bearer(req), req.matches[1])); });
  });

  s.Put(R"(/devices/([^/]+))", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      nlohmann::json patch;
      try {
        patch = body_json(req);
      } catch (const Error&) {
        patch = nullptr;
      }
      send_json(res, 200, svc.update_device(bearer(req), req.matches[1], patch));
    });
  });

  s.Get(R"(/devices/([^/]+)/readings)", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      ReadingQuery q;
      q.from = time_param(req, "from");
      q.to = time_param(req, "to");
      if (req.has_param("max_points")) {
        const auto text = req.get_param_value("max_points");
        std::size_t v = 0;
        auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc{} || p != text.data() + text.size()) throw Error(ErrorKind::Validation, "bad max_points");
        q.max_points = v;
      }
      send_json(res, 200, svc.query_readings(bearer(req), req.matches[1], q));
    });
  });

  s.Get(R"(/devices/([^/]+)/digests)", [&svc](const Request& req, Response& res) {
    guarded(res, [&] { send_json(res, 200, svc.list_digests(bearer(req), req.matches[1])); });
  });

  s.Get(R"(/devices/([^/]+)/assessments)", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      send_json(res, 200,
                svc.list_assessments(bearer(req), req.matches[1], time_param(req, "from"), time_param(req, "to")));
    });
  });

  s.Post(R"(/devices/([^/]+)/assess)", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      nlohmann::json j;
      try {
        j = body_json(req);
      } catch (const Error&) {
        j = nlohmann::json::object();
      }
      Timestamp bf{}, bt{}, from{}, to{};
      try {
        bf = required_time(j, "baseline_from");
        bt = required_time(j, "baseline_to");
        from = required_time(j, "from");
        to = required_time(j, "to");
      } catch (const std::exception&) {
        // Reversed range so the call is audited and rejected as invalid.
        bf = Timestamp{std::chrono::milliseconds(1)};
        bt = Timestamp{};
      }
      send_json(res, 200, svc.assess_stored(bearer(req), req.matches[1], bf, bt, from, to));
    });
  });

  s.Get(R"(/devices/([^/]+)/packets)", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      send_json(res, 200, svc.packet_tracer(bearer(req), req.matches[1], time_param(req, "from"), time_param(req, "to")));
    });
  });

  s.Get("/notifications", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      const bool unread = req.has_param("unread") && req.get_param_value("unread") != "false";
      send_json(res, 200, svc.list_notifications(bearer(req), unread));
    });
  });

  s.Post("/notifications", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      std::vector<std::uint64_t> ids;
      try {
        const auto j = body_json(req);
        ids = j.at(j.contains("ids") ? "ids" : "read").get<std::vector<std::uint64_t>>();
      } catch (const std::exception&) {
        ids.clear();
      }
      send_json(res, 200, {{"marked", svc.mark_notifications_read(bearer(req), ids)}});
    });
  });

  s.Get("/audit", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      const auto entries = svc.audit_log(bearer(req));
      send_json(res, 200, entries);
    });
  });

  auto ingest = [&svc](const char* key, auto method) {
    return [&svc, key, method](const Request& req, Response& res) {
      guarded(res, [&] {
        nlohmann::json rows;
        try {
          rows = rows_of(body_json(req), key);
        } catch (const Error&) {
          rows = nullptr;  // rejected (and audited) by the service
        }
        send_json(res, 200, {{key == std::string("samples") ? "accepted" : "stored", (svc.*method)(bearer(req), rows)}});
      });
    };
  };
  s.Post("/ingest/batch", ingest("samples", &Service::ingest_batch));
  s.Post("/ingest/digests", ingest("digests", &Service::ingest_digests));
  s.Post("/ingest/assessments", ingest("assessments", &Service::ingest_assessments));

  s.Post("/stream", [&svc](const Request& req, Response& res) {
    guarded(res, [&] {
      const auto j = body_json(req);
      auto token = j.value("token", std::string{});
      if (token.empty()) token = bearer(req);
      const auto ids = j.at("device_ids").get<std::vector<DeviceId>>();
      auto sub = svc.subscribe(token, ids);
      auto opened = std::make_shared<bool>(false);
      auto last_write = std::make_shared<std::chrono::steady_clock::time_point>(std::chrono::steady_clock::now());
      res.set_chunked_content_provider(
          "application/x-ndjson",
          [sub, ids, opened, last_write](std::size_t, httplib::DataSink& sink) {
            auto write = [&](const nlohmann::json& line) {
              const auto text = line.dump() + "\n";
              *last_write = std::chrono::steady_clock::now();
              return sink.write(text.data(), text.size());
            };
            if (!*opened) {
              *opened = true;
              return write({{"type", "subscribed"}, {"device_ids", ids}});
            }
            if (!sink.is_writable()) return false;
            auto e = sub->next(std::chrono::milliseconds(250));
            if (e) return write(*e);
            if (sub->closed()) {
              sink.done();
              return true;
            }
            if (std::chrono::steady_clock::now() - *last_write > kHeartbeat) return write({{"type", "heartbeat"}});
            return true;
          },
          [sub](bool) { sub->close(); });
    });
  });
}

HttpCloudSink::HttpCloudSink(const std::string& base_url, std::map<std::string, std::string> gateway_tokens)
    : client_(std::make_unique<httplib::Client>(base_url)), tokens_(std::move(gateway_tokens)) {
  client_->set_connection_timeout(5);
  client_->set_read_timeout(60);
  client_->set_write_timeout(60);
}

HttpCloudSink::~HttpCloudSink() = default;

void HttpCloudSink::post(const std::string& path, const std::string& gateway_id, const nlohmann::json& body) {
  auto it = tokens_.find(gateway_id);
  if (it == tokens_.end()) throw Error(ErrorKind::Configuration, "no token configured for gateway '" + gateway_id + "'");
  httplib::Headers headers{{"Authorization", "Bearer " + it->second}};
  auto r = client_->Post(path, headers, body.dump(), "application/json");
  if (!r) throw Error(ErrorKind::Io, "POST " + path + " failed: " + httplib::to_string(r.error()));
  if (r->status != 200) {
    throw Error(r->status == 401 ? ErrorKind::Authentication : ErrorKind::Io,
                "POST " + path + " returned " + std::to_string(r->status) + ": " + r->body);
  }
}

void HttpCloudSink::ingest_batch(const std::string& gateway_id, std::span<const AccelSample> samples) {
  post("/ingest/batch", gateway_id, nlohmann::json(std::vector<AccelSample>(samples.begin(), samples.end())));
}

void HttpCloudSink::post_digests(const std::string& gateway_id, std::span<const Digest> digests) {
  post("/ingest/digests", gateway_id, nlohmann::json(std::vector<Digest>(digests.begin(), digests.end())));
}

void HttpCloudSink::post_assessments(const std::string& gateway_id, std::span<const detector::HealthAssessment> a) {
  post("/ingest/assessments", gateway_id, nlohmann::json(std::vector<detector::HealthAssessment>(a.begin(), a.end())));
}

}  // namespace palm::service
