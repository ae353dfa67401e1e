#ifndef ATTNET_MODEL_HPP_
#define ATTNET_MODEL_HPP_

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "attnet/attention.hpp"
#include "attnet/autodiff.hpp"
#include "attnet/tensor.hpp"

namespace attnet {

// One backbone layer. Layers form a chain; `args` holds integer
// hyperparameters (out, k, stride, pad, bn).
struct LayerDef {
  std::string name;
  std::string kind;  // conv | relu | maxpool | batchnorm | resblock |
                     // globalpool | flatten | linear
  std::map<std::string, int64_t> args;
  int64_t arg(const std::string& key, int64_t fallback) const {
    auto it = args.find(key);
    return it == args.end() ? fallback : it->second;
  }
};

struct AttentionDef {
  std::string tap;
  CompatibilityKind kind = CompatibilityKind::DotProduct;
};

// Declarative architecture. Text format ("attnet-spec v1") documented in the
// README; parse/format round-trip exactly.
struct NetworkSpec {
  std::string name;
  int64_t in_c = 3, in_h = 32, in_w = 32;
  int64_t classes = 10;
  HeadMode head_mode = HeadMode::Concat;
  std::string global_source;
  std::vector<LayerDef> layers;
  std::vector<std::string> taps;
  std::vector<AttentionDef> attention;
};

NetworkSpec parse_network_spec(const std::string& text);
std::string format_network_spec(const NetworkSpec& spec);
NetworkSpec load_network_spec(const std::string& path);
void save_network_spec(const std::string& path, const NetworkSpec& spec);

// ConfigError on structural violations: unknown layers/taps, taps not
// preceding the global source, tap on a resolution-dropping layer, attention
// heads on undeclared taps, global source not a vector.
void validate_spec(const NetworkSpec& spec);

// Ready-made desk-scale architectures.
// att_levels: 0 = baseline, 1..3 = att/att2/att3 (deepest blocks first-served:
// 1 -> block 4, 2 -> blocks 3+4, 3 -> blocks 2+3+4).
NetworkSpec vgg_mini_spec(int att_levels, CompatibilityKind kind, HeadMode mode,
                          int64_t classes, int64_t input_hw);
// att_levels: 0 = baseline, 2 = taps on levels 2 and 3.
NetworkSpec rn_mini_spec(int att_levels, CompatibilityKind kind, HeadMode mode, int64_t classes,
                         int64_t input_hw, bool batchnorm = true);
// Preset ids like "vgg-mini", "vgg-mini-att2-pc-concat", "rn-mini-att2-dp-indep".
NetworkSpec preset_spec(const std::string& id, int64_t classes, int64_t input_hw);
bool is_preset_id(const std::string& id);

struct Param {
  std::string name;
  Tensor value;
  bool trainable = true;  // false for running stats and normalization buffers
};

struct CensusRow {
  std::string name;
  std::vector<int64_t> shape;
  int64_t count = 0;
};

struct ForwardOptions {
  bool training = false;            // batchnorm batch-stats mode + running update
  bool params_require_grad = false;
  bool input_requires_grad = false;
  const Tensor* g_override = nullptr;  // replaces g as the attention query
};

// A forward pass and everything needed to reach back into it. The tape owns
// all intermediate values; vars are only valid while it lives.
struct ForwardResult {
  std::shared_ptr<Tape> tape;
  Var input;
  Var probs;                 // [N,T]
  Var g;                     // [N,G] global descriptor
  Var features;              // classifier input, [N,D]
  std::vector<Var> head_ga;  // per attention head [N,C_s]
  std::vector<Var> maps;     // per attention head [N,H_s*W_s]
  std::vector<std::pair<int64_t, int64_t>> map_hw;
  std::vector<int> map_layer_ids;  // tap positions in spec.layers
  std::vector<std::pair<std::string, Var>> param_vars;  // trainable params on the tape
};

class Network {
 public:
  static Network build(const NetworkSpec& spec, uint64_t seed);

  ForwardResult forward(const Tensor& batch, const ForwardOptions& opts = {});

  // Convenience inference: class probabilities plus per-head maps [N,H,W].
  std::pair<Tensor, std::vector<Tensor>> predict(const Tensor& batch);

  // Per-image AttentionMapSet from a forward result.
  AttentionMapSet map_set_for(const ForwardResult& fr, int64_t image_index,
                              const std::string& image_id) const;

  std::vector<CensusRow> param_census() const;
  int64_t param_total() const;

  Param& param(const std::string& name);
  const Param& param(const std::string& name) const;
  int64_t global_dim() const { return global_dim_; }

  // Folds dataset normalization into the graph so the network consumes raw
  // [0,1] pixels. scale/shift are per input channel.
  void set_input_normalization(const std::vector<double>& scale,
                               const std::vector<double>& shift);

  NetworkSpec spec;
  uint64_t seed = 0;
  std::vector<Param> params;  // registration order

 private:
  int64_t index_of(const std::string& name) const;
  std::map<std::string, int64_t> param_index_;
  int64_t global_dim_ = 0;
  // Spatial grid the flatten layer saw at build time; non-native inputs are
  // adaptively pooled back to it.
  int64_t native_flatten_h_ = 1, native_flatten_w_ = 1;
};

// Checkpoint directory: spec.attnetspec + manifest.json + params/NNN_name.atnt.
void save_checkpoint(const std::string& dir, const Network& net);
Network load_checkpoint(const std::string& dir);

}  // namespace attnet

#endif  // ATTNET_MODEL_HPP_
