#include "storage.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "palm/errors.hpp"

namespace palm::service {

namespace fs = std::filesystem;

namespace {

std::string hour_key(Timestamp t) { return format_timestamp(t).substr(0, 13); }

template <typename T, typename F>
void read_jsonl(const fs::path& file, std::size_t& skipped, F&& sink) {
  std::ifstream in(file);
  if (!in) return;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      sink(nlohmann::json::parse(line).get<T>());
    } catch (const std::exception&) {
      ++skipped;
    }
  }
}

nlohmann::json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) return nullptr;
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::CorruptInput, "unreadable " + file.string() + ": " + e.what());
  }
}

}  // namespace

Storage::Storage(fs::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  fs::create_directories(dir_ / "samples", ec);
  fs::create_directories(dir_ / "digests", ec);
  fs::create_directories(dir_ / "assessments", ec);
  if (ec || !fs::is_directory(dir_)) throw Error(ErrorKind::Io, "cannot create storage directory " + dir_.string());
}

Storage::Contents Storage::load() const {
  Contents c;
  if (auto j = read_json(dir_ / "devices.json"); j.is_array()) {
    for (const auto& d : j) {
      auto rec = d.get<DeviceRecord>();
      c.devices[rec.device_id] = std::move(rec);
    }
  }
  if (auto j = read_json(dir_ / "notifications.json"); j.is_array()) {
    for (const auto& n : j) c.notifications.push_back(n.get<NotificationRecord>());
  }
  read_jsonl<AuditEntry>(dir_ / "audit.jsonl", c.skipped_lines, [&](AuditEntry a) { c.audit.push_back(std::move(a)); });

  for (const auto& entry : fs::directory_iterator(dir_ / "samples")) {
    if (!entry.is_directory()) continue;
    const auto device = entry.path().filename().string();
    std::vector<fs::path> segments;
    for (const auto& seg : fs::directory_iterator(entry.path())) {
      if (seg.path().extension() == ".jsonl") segments.push_back(seg.path());
    }
    std::sort(segments.begin(), segments.end());
    auto& out = c.samples[device];
    for (const auto& seg : segments) {
      read_jsonl<AccelSample>(seg, c.skipped_lines, [&](AccelSample s) { out.push_back(std::move(s)); });
    }
  }
  for (const auto& entry : fs::directory_iterator(dir_ / "digests")) {
    auto& out = c.digests[entry.path().stem().string()];
    read_jsonl<Digest>(entry.path(), c.skipped_lines, [&](Digest d) { out.push_back(std::move(d)); });
  }
  for (const auto& entry : fs::directory_iterator(dir_ / "assessments")) {
    auto& out = c.assessments[entry.path().stem().string()];
    read_jsonl<detector::HealthAssessment>(entry.path(), c.skipped_lines,
                                           [&](detector::HealthAssessment a) { out.push_back(std::move(a)); });
  }
  return c;
}

void Storage::append_lines(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::app | std::ios::binary);
  out << text;
  out.flush();
  if (!out) throw Error(ErrorKind::Io, "cannot append to " + file.string());
}

void Storage::replace_file(const fs::path& file, const std::string& text) {
  const auto tmp = fs::path(file.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    out << text;
    out.flush();
    if (!out) throw Error(ErrorKind::Io, "cannot write " + tmp.string());
  }
  fs::rename(tmp, file);
}

void Storage::append_samples(const DeviceId& device, std::span<const AccelSample> samples) {
  std::map<std::string, std::string> by_hour;
  for (const auto& s : samples) {
    auto& text = by_hour[hour_key(s.timestamp)];
    text += nlohmann::json(s).dump();
    text += '\n';
  }
  std::lock_guard lock(mutex_);
  const auto dir = dir_ / "samples" / device;
  fs::create_directories(dir);
  for (const auto& [hour, text] : by_hour) append_lines(dir / (hour + ".jsonl"), text);
}

void Storage::append_digests(const DeviceId& device, std::span<const Digest> digests) {
  std::string text;
  for (const auto& d : digests) text += nlohmann::json(d).dump() + "\n";
  std::lock_guard lock(mutex_);
  append_lines(dir_ / "digests" / (device + ".jsonl"), text);
}

void Storage::append_assessments(const DeviceId& device, std::span<const detector::HealthAssessment> assessments) {
  std::string text;
  for (const auto& a : assessments) text += nlohmann::json(a).dump() + "\n";
  std::lock_guard lock(mutex_);
  append_lines(dir_ / "assessments" / (device + ".jsonl"), text);
}

void Storage::append_audit(const AuditEntry& entry) {
  const auto text = nlohmann::json(entry).dump() + "\n";
  std::lock_guard lock(mutex_);
  append_lines(dir_ / "audit.jsonl", text);
}

void Storage::write_devices(const std::map<DeviceId, DeviceRecord>& devices) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& [_, d] : devices) j.push_back(d);
  std::lock_guard lock(mutex_);
  replace_file(dir_ / "devices.json", j.dump(1) + "\n");
}

void Storage::write_notifications(const std::vector<NotificationRecord>& notifications) {
  const auto text = nlohmann::json(notifications).dump(1) + "\n";
  std::lock_guard lock(mutex_);
  replace_file(dir_ / "notifications.json", text);
}

void Storage::write_index(const std::map<DeviceId, std::size_t>& sample_counts) {
  std::lock_guard lock(mutex_);
  nlohmann::json devices = nlohmann::json::object();
  for (const auto& [device, count] : sample_counts) {
    std::vector<std::string> segments;
    const auto dir = dir_ / "samples" / device;
    if (fs::is_directory(dir)) {
      for (const auto& seg : fs::directory_iterator(dir)) segments.push_back(seg.path().filename().string());
    }
    std::sort(segments.begin(), segments.end());
    devices[device] = {{"samples", count}, {"segments", segments}};
  }
  replace_file(dir_ / "index.json", nlohmann::json{{"format", 1}, {"devices", devices}}.dump(1) + "\n");
}

}  // namespace palm::service
