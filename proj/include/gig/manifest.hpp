#pragma once

// Run manifests: the resolved configuration, its hash, the seeds, and
// SHA-256 checksums of every input and output artifact. Requires libcrypto.

#include "gig/experiment.hpp"

#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace gig {

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

inline std::string file_sha256(const fs::path& path) { return sha256_hex(read_text_file(path)); }

inline constexpr const char* kManifestFile = "manifest.json";

struct Manifest {
  std::string command;
  std::vector<std::string> arguments;  // as needed to re-run, output flag excluded
  std::string config;                  // resolved key = value document
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::string> inputs;   // path -> sha256
  std::map<std::string, std::string> outputs;  // path relative to the output directory -> sha256

  std::string config_sha256() const { return sha256_hex(config); }

  void add_input(const fs::path& p) {
    if (fs::is_directory(p)) {
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file() && e.path().filename() != kManifestFile) inputs[e.path().string()] = file_sha256(e.path());
      }
    } else {
      inputs[p.string()] = file_sha256(p);
    }
  }

  /// Checksums every regular file under `dir` except the manifest itself.
  void record_outputs(const fs::path& dir) {
    outputs.clear();
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (!e.is_regular_file() || e.path().filename() == kManifestFile) continue;
      outputs[fs::relative(e.path(), dir).generic_string()] = file_sha256(e.path());
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["arguments"] = arguments;
    j["config_sha256"] = config_sha256();
    j["config"] = config;
    j["seeds"] = seeds;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    return j;
  }

  static Manifest from_json(const nlohmann::json& j) {
    Manifest m;
    m.command = j.at("command").get<std::string>();
    m.arguments = j.at("arguments").get<std::vector<std::string>>();
    m.config = j.at("config").get<std::string>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    if (j.at("config_sha256").get<std::string>() != m.config_sha256()) {
      throw DataError("manifest config hash does not match its config");
    }
    return m;
  }

  void write(const fs::path& dir) const { write_text_file(dir / kManifestFile, to_json().dump(2) + '\n'); }

  static Manifest read(const fs::path& path) {
    try {
      return from_json(nlohmann::json::parse(read_text_file(path)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ": malformed manifest: " + e.what());
    }
  }
};

/// Output files whose checksums differ between two manifests, or that only
/// one of them lists.
inline std::vector<std::string> differing_outputs(const Manifest& a, const Manifest& b) {
  std::vector<std::string> out;
  for (const auto& [path, sum] : a.outputs) {
    auto it = b.outputs.find(path);
    if (it == b.outputs.end() || it->second != sum) out.push_back(path);
  }
  for (const auto& [path, sum] : b.outputs) {
    if (!a.outputs.count(path)) out.push_back(path);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace gig
