#pragma once

// Run manifests: every CLI command records its resolved configuration,
// seed, code version, timestamps and emitted files as JSON, so a run can
// be reproduced from the manifest alone.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "protolab/common.hpp"
#include "protolab/version.hpp"

namespace protolab {

inline std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::string version = kVersion;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::string started = now_iso8601();
  std::string finished;
  std::vector<std::string> outputs;

  void finish() { finished = now_iso8601(); }

  void write(const std::filesystem::path& path) const {
    nlohmann::json j;
    j["command"] = command;
    j["version"] = version;
    j["seed"] = seed;
    j["config"] = config;
    j["started"] = started;
    j["finished"] = finished;
    j["outputs"] = outputs;
    std::ofstream out(path);
    PROTOLAB_REQUIRE(out.good(), "manifest: cannot write ", path.string());
    out << j.dump(2) << "\n";
  }
};

}  // namespace protolab
