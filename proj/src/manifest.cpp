#include "attnet/manifest.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "attnet/errors.hpp"
#include "json.hpp"

namespace attnet {

uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fnv1a64_hex(const std::string& bytes) {
  static const char* digits = "0123456789abcdef";
  uint64_t h = fnv1a64(bytes);
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os << text;
  if (!os) throw IoError("write failed: " + path);
}

std::string hash_file(const std::string& path) { return fnv1a64_hex(read_text_file(path)); }

std::string format_run_manifest(const RunManifest& m) {
  nlohmann::ordered_json j;
  j["format"] = "attnet-run-manifest-v1";
  j["command"] = m.command;
  j["arguments"] = m.arguments;
  nlohmann::ordered_json inputs = nlohmann::ordered_json::array();
  for (const auto& [path, hash] : m.input_hashes)
    inputs.push_back({{"path", path}, {"fnv1a64", hash}});
  j["inputs"] = inputs;
  j["seed"] = m.seed;
  j["tool_version"] = m.tool_version;
  j["outputs"] = m.outputs;
  return j.dump(2) + "\n";
}

void save_run_manifest(const std::string& path, const RunManifest& m) {
  write_text_file(path, format_run_manifest(m));
}

RunManifest load_run_manifest(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad manifest " + path + ": " + e.what());
  }
  if (j.value("format", "") != "attnet-run-manifest-v1")
    throw IoError("bad manifest format in " + path);
  RunManifest m;
  m.command = j.value("command", "");
  m.arguments = j.value("arguments", std::vector<std::string>{});
  if (j.contains("inputs"))
    for (const auto& e : j["inputs"])
      m.input_hashes.emplace_back(e.value("path", ""), e.value("fnv1a64", ""));
  m.seed = j.value("seed", uint64_t{0});
  m.tool_version = j.value("tool_version", "");
  m.outputs = j.value("outputs", std::vector<std::string>{});
  return m;
}

}  // namespace attnet
