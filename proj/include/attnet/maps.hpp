#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnet/data.hpp"
#include "attnet/model.hpp"
#include "attnet/tensor.hpp"

namespace attnet {

// Attention map fused across levels, rescaled to [0,1], with provenance.
struct FusedMap {
  Tensor values;               // [H,W], min 0 / max 1 unless constant (then all zeros)
  std::vector<int> layer_ids;  // tap positions the map was fused from (may be empty)
  double raw_min = 0.0;        // bounds of sqrt(m1*m2) before the rescale
  double raw_max = 0.0;
};

struct BinaryMask {
  Tensor values;      // [H,W], entries exactly 0.0 / 1.0
  int threshold = 0;  // 0-255 histogram bin the cut was made at
};

// Corner-aligned bilinear interpolation. Target dims must be >= source dims;
// output corners reproduce the source corners exactly.
Tensor upsample_bilinear(const Tensor& map, int64_t target_h, int64_t target_w);

// sqrt(m1 * m2) elementwise, then rescaled to [0,1]. A constant product maps
// to all-zeros. Inputs must share a shape and be nonnegative.
FusedMap fuse(const Tensor& m1, const Tensor& m2);

// Otsu threshold over the 256-bin histogram of round(clamp(v,0,1)*255): the
// smallest t maximizing the between-class variance w0*w1*(mu0-mu1)^2.
// A histogram with a single occupied bin returns that bin, so the "> t"
// foreground of a constant map is empty.
int otsu_threshold(const Tensor& map);
int otsu_threshold_hist(const std::vector<int64_t>& hist256);

// Foreground = quantized bin strictly greater than the threshold.
BinaryMask binarize(const Tensor& map);                 // Otsu threshold
BinaryMask binarize(const Tensor& map, int threshold);  // explicit threshold

// Intersection-over-union of {0,1} masks; 1.0 when both are empty.
double jaccard(const Tensor& pred, const Tensor& truth);
double jaccard(const BinaryMask& pred, const BinaryMask& truth);

// Fuses the net's two deepest attention maps: upsample both to the image's
// resolution, sqrt-product + rescale, Otsu binarize. image is [C,H,W].
BinaryMask segment(Network& net, const Tensor& image);
// The intermediate fused map of the same pipeline (for heatmap export).
FusedMap fused_map(Network& net, const Tensor& image);

// Share of the map's mass falling inside a box given in image-pixel
// coordinates; cells partially covered count by their overlap fraction.
double attention_mass_in_box(const Tensor& map, const Box& box,
                             int64_t image_h, int64_t image_w);

// Attention maps of the target image computed with its own global vector
// versus the query image's, plus the per-location relative change.
struct QuerySwapResult {
  std::vector<int> layer_ids;      // tap position per head
  std::vector<Tensor> map_self;    // [h,w], target's own query
  std::vector<Tensor> map_query;   // [h,w], query image's g swapped in
  std::vector<Tensor> rel_change;  // (query - self) / max(self, 1e-12)
};

// Both images are [C,H,W] at the net's build resolution.
QuerySwapResult query_swap(Network& net, const Tensor& target_image,
                           const Tensor& query_image);

// Export helpers: mask as {0,255} PGM, map as grayscale PGM, and a color
// overlay (0.5*image + 0.5*jet(map), map upsampled to the image size) as PPM.
void save_mask(const std::string& path, const BinaryMask& mask);
void save_heatmap(const std::string& path, const Tensor& map);
void save_heatmap_overlay(const std::string& path, const Tensor& image,
                          const Tensor& map);

}  // namespace attnet
