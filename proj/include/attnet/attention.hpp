#ifndef ATTNET_ATTENTION_HPP_
#define ATTNET_ATTENTION_HPP_

#include <string>
#include <utility>
#include <vector>

#include "attnet/autodiff.hpp"
#include "attnet/tensor.hpp"

namespace attnet {

enum class CompatibilityKind { DotProduct, Parameterised };
enum class HeadMode { Concat, Indep };

// One attention unit attached at a tap layer. When the global descriptor's
// dimensionality differs from the tap's channel count, g is projected DOWN to
// the local dimensionality; local features are never projected up.
struct AttentionHead {
  int layer_id = 0;
  int64_t local_dim = 0;
  int64_t shared_dim = 0;  // dimensionality after alignment (== local_dim)
  bool has_projection = false;
  Tensor proj_w;  // [dim(g), local_dim]
  Tensor proj_b;  // [local_dim]
  CompatibilityKind kind = CompatibilityKind::DotProduct;
  Tensor u;  // [shared_dim], Parameterised only
};

// Normalized per-layer attention maps for one input image.
struct AttentionMapSet {
  std::string image_id;
  std::vector<int> layer_ids;
  std::vector<Tensor> maps;  // each [H,W], entries in (0,1], sums to 1
};

// Throws NumericError if any map breaks the sum-to-one / (0,1] invariants.
void validate_map_set(const AttentionMapSet& set, double tol = 1e-9);

// Writes <image_id>_att_L<layer>.atnt per layer into dir; with render_pgm
// also writes <image_id>_att_L<layer>.pgm, min-max rescaled to 8 bits.
// Returns the paths written.
std::vector<std::string> export_map_set(const std::string& dir, const AttentionMapSet& set,
                                        bool render_pgm);

// c_i = <l_i, g> (DotProduct) or c_i = <u, l_i + g> (Parameterised).
// locals [n,d], g [d], u [d] (Parameterised only, else pass nullptr).
Tensor compatibility_scores(const Tensor& locals, const Tensor& g, CompatibilityKind kind,
                            const Tensor* u = nullptr);

// Stable softmax of a score vector.
Tensor normalize_scores(const Tensor& c);

// g_a = sum_i a_i * l_i; a must be a probability vector.
Tensor attend(const Tensor& locals, const Tensor& a);

// Tape-resident parameters of one head, used inside network graphs.
struct AttentionHeadVars {
  bool has_projection = false;
  Var proj_w;
  Var proj_b;
  CompatibilityKind kind = CompatibilityKind::DotProduct;
  Var u;
};

// Full per-head pipeline on a tape: optional projection of g, compatibility,
// per-image softmax over all spatial positions, weighted aggregation.
// feat [N,C,H,W], g [N,G]; returns (g_a [N,C], a [N,H*W]).
std::pair<Var, Var> attention_forward_on_tape(Tape& t, Var feat, Var g,
                                              const AttentionHeadVars& head);

// Convenience non-training wrapper; returns (g_a [N,C], maps [N,H,W]).
std::pair<Tensor, Tensor> attention_forward(const Tensor& feature_map, const Tensor& g,
                                            const AttentionHead& head);

struct LinearClassifier {
  Tensor w;  // [D,T]
  Tensor b;  // [T]
};

// Concat: single classifier over the concatenated descriptors.
// Indep: one classifier per descriptor, class probabilities averaged.
// Returns row-stochastic [N,T].
Tensor classify(const std::vector<Tensor>& g_a_list, HeadMode mode,
                const std::vector<LinearClassifier>& classifiers);

}  // namespace attnet

#endif  // ATTNET_ATTENTION_HPP_
