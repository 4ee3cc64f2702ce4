#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <span>
#include <vector>

#include "palm/detector.hpp"
#include "palm/service.hpp"
#include "palm/telemetry.hpp"

namespace palm::service {

/// Append-only on-disk layout:
///   devices.json, notifications.json, audit.jsonl, index.json
///   samples/<device>/<YYYY-MM-DDTHH>.jsonl
///   digests/<device>.jsonl, assessments/<device>.jsonl
class Storage {
 public:
  struct Contents {
    std::map<DeviceId, DeviceRecord> devices;
    std::map<DeviceId, std::vector<AccelSample>> samples;
    std::map<DeviceId, std::vector<Digest>> digests;
    std::map<DeviceId, std::vector<detector::HealthAssessment>> assessments;
    std::vector<NotificationRecord> notifications;
    std::vector<AuditEntry> audit;
    std::size_t skipped_lines = 0;  // torn or unreadable trailing writes
  };

  explicit Storage(std::filesystem::path dir);

  Contents load() const;

  void append_samples(const DeviceId& device, std::span<const AccelSample> samples);
  void append_digests(const DeviceId& device, std::span<const Digest> digests);
  void append_assessments(const DeviceId& device, std::span<const detector::HealthAssessment> assessments);
  void append_audit(const AuditEntry& entry);
  void write_devices(const std::map<DeviceId, DeviceRecord>& devices);
  void write_notifications(const std::vector<NotificationRecord>& notifications);
  /// Per-device segment list and sample counts.
  void write_index(const std::map<DeviceId, std::size_t>& sample_counts);

  const std::filesystem::path& dir() const { return dir_; }

 private:
  void append_lines(const std::filesystem::path& file, const std::string& text);
  void replace_file(const std::filesystem::path& file, const std::string& text);

  std::filesystem::path dir_;
  std::mutex mutex_;
};

}  // namespace palm::service
