#pragma once

#include <map>
#include <memory>
#include <string>
#include <thread>

#include "palm/fieldsim.hpp"
#include "palm/service.hpp"

namespace httplib {
class Server;
class Client;
}  // namespace httplib

namespace palm::service {

/// JSON-over-HTTP front end for a Service. Streams are chunked
/// newline-delimited JSON.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();

  /// Binds without serving; port 0 picks a free port. Returns the bound
  /// port. Throws Io when the address is unavailable.
  int bind(const std::string& host, int port);
  /// Serves until stop(); requires bind().
  void serve();
  /// serve() on a background thread; returns once accepting.
  void start();
  void stop();
  int port() const { return port_; }

 private:
  void routes();

  Service& service_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = -1;
};

/// fieldsim sink posting to a remote service with per-gateway tokens.
class HttpCloudSink : public fieldsim::CloudSink {
 public:
  HttpCloudSink(const std::string& base_url, std::map<std::string, std::string> gateway_tokens);
  ~HttpCloudSink() override;

  void ingest_batch(const std::string& gateway_id, std::span<const AccelSample> samples) override;
  void post_digests(const std::string& gateway_id, std::span<const Digest> digests) override;
  void post_assessments(const std::string& gateway_id, std::span<const detector::HealthAssessment> a) override;

 private:
  void post(const std::string& path, const std::string& gateway_id, const nlohmann::json& body);

  std::unique_ptr<httplib::Client> client_;
  std::map<std::string, std::string> tokens_;
};

}  // namespace palm::service
