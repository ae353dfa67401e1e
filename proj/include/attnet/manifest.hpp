#ifndef ATTNET_MANIFEST_HPP_
#define ATTNET_MANIFEST_HPP_

#include <cstdint>
#include <string>
#include <vector>

namespace attnet {

// FNV-1a over the raw bytes; used to fingerprint configs and specs.
uint64_t fnv1a64(const std::string& bytes);
std::string fnv1a64_hex(const std::string& bytes);

// Record of one artifact-producing CLI invocation. Holds everything needed
// to rerun the command and byte-compare its outputs.
struct RunManifest {
  std::string command;                   // subcommand name
  std::vector<std::string> arguments;    // argv after the subcommand
  std::vector<std::pair<std::string, std::string>> input_hashes;  // (path, fnv hex)
  uint64_t seed = 0;
  std::string tool_version;
  std::vector<std::string> outputs;      // paths written, relative to the manifest dir
};

std::string format_run_manifest(const RunManifest& m);
void save_run_manifest(const std::string& path, const RunManifest& m);
RunManifest load_run_manifest(const std::string& path);

// Whole-file convenience hash (IoError if unreadable).
std::string hash_file(const std::string& path);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace attnet

#endif  // ATTNET_MANIFEST_HPP_
