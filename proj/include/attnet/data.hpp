#ifndef ATTNET_DATA_HPP_
#define ATTNET_DATA_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "attnet/tensor.hpp"

namespace attnet {

// Axis-aligned rectangle in pixel coordinates; x is the column of the left
// edge, y the row of the top edge.
struct Box {
  int64_t x = 0, y = 0, w = 0, h = 0;
};

// A labeled image corpus, optionally with ground-truth object boxes and
// binary support masks (one per image, values exactly {0,1}).
struct LabeledImageSet {
  Tensor images;             // [N,3,H,W], values in [0,1]
  std::vector<int> labels;   // length N
  std::vector<Box> boxes;    // empty or length N
  std::vector<Tensor> masks; // empty or length N, each [H,W]

  int64_t size() const { return images.empty() ? 0 : images.dim(0); }
  int64_t height() const { return images.dim(2); }
  int64_t width() const { return images.dim(3); }
  Tensor image(int64_t i) const;  // [3,H,W] copy
};

// ShapeError/ConfigError when the invariants break: label list length,
// box/mask counts, boxes inside bounds, masks binary with support inside
// their box.
void validate_set(const LabeledImageSet& set);

// New set holding set[idx[0]], set[idx[1]], ... (boxes/masks follow along).
LabeledImageSet subset(const LabeledImageSet& set, const std::vector<int64_t>& idx);

// CIFAR-10 binary format: records of 1 label byte + 3072 pixel bytes
// (1024 R, then G, then B, row-major), pixels mapped to [0,1] by /255.
LabeledImageSet load_cifar_binary(const std::string& path);
// Inverse writer; images must be [N,3,32,32], labels 0..9. Values are
// quantized with round(v*255).
void save_cifar_binary(const std::string& path, const LabeledImageSet& set);

struct NormalizationStats {
  std::vector<double> mean; // per channel
  std::vector<double> std;  // per channel, > 0
  bool has_zca = false;
  int64_t height = 0, width = 0;  // geometry the ZCA matrices were fit on
  Tensor zca_mean;  // [D], D = 3*H*W
  Tensor zca;       // [D,D] whitening matrix, symmetric
  Tensor zca_inv;   // [D,D] exact inverse (colouring matrix)
};

// Per-channel mean/std over every pixel of the set (population std).
// With with_zca, also fits x' = U diag(1/sqrt(lambda+eps)) U^T (x - m) from
// the eigendecomposition of the population covariance of flattened images.
// ConfigError: N < 2 or zca_eps <= 0. NumericError: zero-variance channel.
NormalizationStats fit_normalization(const LabeledImageSet& set, bool with_zca = false,
                                     double zca_eps = 1e-2);

// use_zca=false: (x - mean[c]) / std[c] per channel.
// use_zca=true: full-image whitening with the fitted matrix (geometry must
// match the fit). denormalize inverts either path to 1e-12.
Tensor normalize(const Tensor& images, const NormalizationStats& stats, bool use_zca = false);
Tensor denormalize(const Tensor& images, const NormalizationStats& stats, bool use_zca = false);

// The per-channel transform as a scale/shift pair, x' = scale*x + shift,
// ready for Network::set_input_normalization.
std::pair<std::vector<double>, std::vector<double>> channel_scale_shift(
    const NormalizationStats& stats);

// Synthetic object-in-clutter corpus. Class k is the conjunction of
// procedural shape k and palette color k, drawn at a random position over a
// uniform gray canvas. Clutter consists of off-diagonal (shape i, color j),
// i != j, distractor glyphs plus light pixel noise, both independent of the
// label; clutter_density 0 leaves the background exactly uniform. Labels are
// assigned round-robin (i mod classes). Boxes are tight over the glyph
// support; masks equal the support.
// ConfigError: classes outside 2..10, object_size < 4, or
// object_size >= canvas, clutter_density < 0.
LabeledImageSet synth_clutter(int64_t num, int64_t classes, int64_t canvas,
                              int64_t object_size, double clutter_density, uint64_t seed);

// Horizontal flip with p = 0.5 (when flip) and random crop after zero-padding
// crop_pad pixels per side. Shape-preserving; identity when flip=false and
// crop_pad=0; deterministic under seed.
Tensor augment(const Tensor& batch, bool flip, int64_t crop_pad, uint64_t seed);

// Directory export: <dir>/manifest.txt with one record per image,
// "<relpath> <label> [x,y,w,h]", images as binary PPM under <dir>/images/,
// masks (when present) alongside as <stem>_mask.pgm.
void save_dataset(const std::string& dir, const LabeledImageSet& set,
                  const std::string& stem = "img");
LabeledImageSet load_dataset(const std::string& manifest_path);

}  // namespace attnet

#endif  // ATTNET_DATA_HPP_
