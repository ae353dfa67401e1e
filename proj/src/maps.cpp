#include "attnet/maps.hpp"

#include <algorithm>
#include <cmath>

#include "attnet/errors.hpp"
#include "attnet/image_io.hpp"

namespace attnet {

namespace {

void require_map(const Tensor& map, const char* who) {
  if (map.rank() != 2)
    throw ConfigError(std::string(who) + ": map must be rank 2 [H,W], got " +
                      shape_str(map.shape()));
  if (map.numel() < 1)
    throw ConfigError(std::string(who) + ": map must have at least one pixel");
}

int quantize_bin(double v) {
  const double c = std::min(1.0, std::max(0.0, v));
  return static_cast<int>(std::llround(c * 255.0));
}

// Reshapes head maps of a single-image forward pass to [h,w] tensors.
std::vector<Tensor> single_image_maps(const ForwardResult& fr) {
  std::vector<Tensor> maps;
  for (size_t h = 0; h < fr.maps.size(); ++h) {
    const auto [mh, mw] = fr.map_hw[h];
    maps.push_back(fr.tape->val(fr.maps[h]).reshaped({mh, mw}));
  }
  return maps;
}

Tensor as_batch_of_one(const Tensor& image, const char* who) {
  if (image.rank() != 3)
    throw ConfigError(std::string(who) + ": image must be rank 3 [C,H,W], got " +
                      shape_str(image.shape()));
  return image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
}

}  // namespace

Tensor upsample_bilinear(const Tensor& map, int64_t target_h, int64_t target_w) {
  require_map(map, "upsample");
  const int64_t h = map.dim(0);
  const int64_t w = map.dim(1);
  if (target_h < h || target_w < w)
    throw ConfigError("upsample: target " + std::to_string(target_h) + "x" +
                      std::to_string(target_w) + " is smaller than source " +
                      shape_str(map.shape()));
  Tensor out({target_h, target_w});
  for (int64_t i = 0; i < target_h; ++i) {
    const double fy = target_h > 1
                          ? static_cast<double>(i) * static_cast<double>(h - 1) /
                                static_cast<double>(target_h - 1)
                          : 0.0;
    const int64_t y0 = static_cast<int64_t>(fy);
    const int64_t y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (int64_t j = 0; j < target_w; ++j) {
      const double fx = target_w > 1
                            ? static_cast<double>(j) * static_cast<double>(w - 1) /
                                  static_cast<double>(target_w - 1)
                            : 0.0;
      const int64_t x0 = static_cast<int64_t>(fx);
      const int64_t x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      // Lerp form: exact for constant inputs and at zero-weight sample points.
      const double top = map.at(y0, x0) + wx * (map.at(y0, x1) - map.at(y0, x0));
      const double bot = map.at(y1, x0) + wx * (map.at(y1, x1) - map.at(y1, x0));
      out.at(i, j) = top + wy * (bot - top);
    }
  }
  return out;
}

FusedMap fuse(const Tensor& m1, const Tensor& m2) {
  require_map(m1, "fuse");
  if (!m1.same_shape(m2))
    throw ConfigError("fuse: shape mismatch " + shape_str(m1.shape()) + " vs " +
                      shape_str(m2.shape()));
  FusedMap fused;
  fused.values = Tensor(m1.shape());
  for (int64_t i = 0; i < m1.numel(); ++i) {
    if (m1[i] < 0.0 || m2[i] < 0.0)
      throw ConfigError("fuse: map values must be nonnegative");
    fused.values[i] = std::sqrt(m1[i] * m2[i]);
  }
  double lo = fused.values[0];
  double hi = fused.values[0];
  for (int64_t i = 1; i < fused.values.numel(); ++i) {
    lo = std::min(lo, fused.values[i]);
    hi = std::max(hi, fused.values[i]);
  }
  fused.raw_min = lo;
  fused.raw_max = hi;
  if (hi > lo) {
    for (int64_t i = 0; i < fused.values.numel(); ++i)
      fused.values[i] = (fused.values[i] - lo) / (hi - lo);
  } else {
    fused.values.fill(0.0);  // constant map rescales to all-zeros
  }
  return fused;
}

int otsu_threshold_hist(const std::vector<int64_t>& hist256) {
  if (hist256.size() != 256)
    throw ConfigError("otsu: histogram must have 256 bins, got " +
                      std::to_string(hist256.size()));
  int64_t total = 0;
  int64_t weighted = 0;
  int occupied = 0;
  int last_bin = 0;
  for (int b = 0; b < 256; ++b) {
    if (hist256[static_cast<size_t>(b)] < 0)
      throw ConfigError("otsu: negative histogram count");
    if (hist256[static_cast<size_t>(b)] > 0) {
      ++occupied;
      last_bin = b;
    }
    total += hist256[static_cast<size_t>(b)];
    weighted += static_cast<int64_t>(b) * hist256[static_cast<size_t>(b)];
  }
  if (total < 1) throw ConfigError("otsu: empty histogram");
  if (occupied == 1) return last_bin;  // constant input: "> t" is empty

  int best_t = 0;
  double best_sigma = -1.0;
  int64_t n0 = 0;
  int64_t s0 = 0;
  for (int t = 0; t < 256; ++t) {
    n0 += hist256[static_cast<size_t>(t)];
    s0 += static_cast<int64_t>(t) * hist256[static_cast<size_t>(t)];
    const int64_t n1 = total - n0;
    const int64_t s1 = weighted - s0;
    double sigma = 0.0;
    if (n0 > 0 && n1 > 0) {
      const double w0 = static_cast<double>(n0) / static_cast<double>(total);
      const double w1 = static_cast<double>(n1) / static_cast<double>(total);
      const double mu0 = static_cast<double>(s0) / static_cast<double>(n0);
      const double mu1 = static_cast<double>(s1) / static_cast<double>(n1);
      sigma = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    }
    if (sigma > best_sigma) {
      best_sigma = sigma;
      best_t = t;
    }
  }
  return best_t;
}

int otsu_threshold(const Tensor& map) {
  require_map(map, "otsu");
  std::vector<int64_t> hist(256, 0);
  for (int64_t i = 0; i < map.numel(); ++i)
    ++hist[static_cast<size_t>(quantize_bin(map[i]))];
  return otsu_threshold_hist(hist);
}

BinaryMask binarize(const Tensor& map, int threshold) {
  require_map(map, "binarize");
  if (threshold < 0 || threshold > 255)
    throw ConfigError("binarize: threshold " + std::to_string(threshold) +
                      " outside [0,255]");
  BinaryMask mask;
  mask.threshold = threshold;
  mask.values = Tensor(map.shape());
  for (int64_t i = 0; i < map.numel(); ++i)
    mask.values[i] = quantize_bin(map[i]) > threshold ? 1.0 : 0.0;
  return mask;
}

BinaryMask binarize(const Tensor& map) { return binarize(map, otsu_threshold(map)); }

double jaccard(const Tensor& pred, const Tensor& truth) {
  if (!pred.same_shape(truth))
    throw ConfigError("jaccard: shape mismatch " + shape_str(pred.shape()) +
                      " vs " + shape_str(truth.shape()));
  int64_t inter = 0;
  int64_t uni = 0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    if ((pred[i] != 0.0 && pred[i] != 1.0) || (truth[i] != 0.0 && truth[i] != 1.0))
      throw ConfigError("jaccard: masks must be exactly {0,1}");
    const bool p = pred[i] == 1.0;
    const bool t = truth[i] == 1.0;
    inter += (p && t) ? 1 : 0;
    uni += (p || t) ? 1 : 0;
  }
  if (uni == 0) return 1.0;  // both empty
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double jaccard(const BinaryMask& pred, const BinaryMask& truth) {
  return jaccard(pred.values, truth.values);
}

FusedMap fused_map(Network& net, const Tensor& image) {
  Tensor batch = as_batch_of_one(image, "segment");
  ForwardResult fr = net.forward(batch);
  if (fr.maps.size() < 2)
    throw ConfigError("segment: needs at least two attention heads, net has " +
                      std::to_string(fr.maps.size()));
  std::vector<Tensor> maps = single_image_maps(fr);
  const size_t last = maps.size() - 1;
  Tensor up_a = upsample_bilinear(maps[last - 1], image.dim(1), image.dim(2));
  Tensor up_b = upsample_bilinear(maps[last], image.dim(1), image.dim(2));
  FusedMap fused = fuse(up_a, up_b);
  fused.layer_ids = {fr.map_layer_ids[last - 1], fr.map_layer_ids[last]};
  return fused;
}

BinaryMask segment(Network& net, const Tensor& image) {
  return binarize(fused_map(net, image).values);
}

double attention_mass_in_box(const Tensor& map, const Box& box, int64_t image_h,
                             int64_t image_w) {
  require_map(map, "attention_mass_in_box");
  if (box.w <= 0 || box.h <= 0)
    throw ConfigError("attention_mass_in_box: empty box");
  if (box.x < 0 || box.y < 0 || box.x + box.w > image_w || box.y + box.h > image_h)
    throw ConfigError("attention_mass_in_box: box outside the image");
  const int64_t h = map.dim(0);
  const int64_t w = map.dim(1);
  const double cell_h = static_cast<double>(image_h) / static_cast<double>(h);
  const double cell_w = static_cast<double>(image_w) / static_cast<double>(w);
  double total = 0.0;
  double inside = 0.0;
  for (int64_t i = 0; i < h; ++i) {
    const double y_lo = static_cast<double>(i) * cell_h;
    const double y_hi = y_lo + cell_h;
    const double oy = std::max(0.0, std::min(y_hi, static_cast<double>(box.y + box.h)) -
                                        std::max(y_lo, static_cast<double>(box.y)));
    for (int64_t j = 0; j < w; ++j) {
      const double v = map.at(i, j);
      if (v < 0.0)
        throw ConfigError("attention_mass_in_box: map values must be nonnegative");
      const double x_lo = static_cast<double>(j) * cell_w;
      const double x_hi = x_lo + cell_w;
      const double ox = std::max(0.0, std::min(x_hi, static_cast<double>(box.x + box.w)) -
                                          std::max(x_lo, static_cast<double>(box.x)));
      total += v;
      inside += v * ((oy * ox) / (cell_h * cell_w));
    }
  }
  if (total <= 0.0)
    throw ConfigError("attention_mass_in_box: map has no mass");
  // Rounding on non-divisible grids could nudge the ratio past the ends.
  return std::min(1.0, std::max(0.0, inside / total));
}

QuerySwapResult query_swap(Network& net, const Tensor& target_image,
                           const Tensor& query_image) {
  Tensor target = as_batch_of_one(target_image, "query_swap");
  Tensor query = as_batch_of_one(query_image, "query_swap");
  if (!target_image.same_shape(query_image))
    throw ConfigError("query_swap: resolution mismatch, target " +
                      shape_str(target_image.shape()) + " vs query " +
                      shape_str(query_image.shape()));
  if (target_image.dim(1) != net.spec.in_h || target_image.dim(2) != net.spec.in_w)
    throw ConfigError("query_swap: images must be at the net's native " +
                      std::to_string(net.spec.in_h) + "x" +
                      std::to_string(net.spec.in_w) + " resolution, got " +
                      shape_str(target_image.shape()));

  ForwardResult fr_query = net.forward(query);
  const Tensor g_query = fr_query.tape->val(fr_query.g);

  ForwardResult fr_self = net.forward(target);
  if (fr_self.maps.empty())
    throw ConfigError("query_swap: net has no attention heads");

  ForwardOptions opts;
  opts.g_override = &g_query;
  ForwardResult fr_swap = net.forward(target, opts);

  QuerySwapResult res;
  res.layer_ids = fr_self.map_layer_ids;
  res.map_self = single_image_maps(fr_self);
  res.map_query = single_image_maps(fr_swap);
  for (size_t hd = 0; hd < res.map_self.size(); ++hd) {
    Tensor rel(res.map_self[hd].shape());
    for (int64_t i = 0; i < rel.numel(); ++i) {
      const double a_self = res.map_self[hd][i];
      const double a_query = res.map_query[hd][i];
      rel[i] = (a_query - a_self) / std::max(a_self, 1e-12);
    }
    res.rel_change.push_back(std::move(rel));
  }
  return res;
}

void save_mask(const std::string& path, const BinaryMask& mask) {
  save_mask_pgm(path, mask.values);
}

void save_heatmap(const std::string& path, const Tensor& map) {
  require_map(map, "save_heatmap");
  save_pgm(path, map);
}

void save_heatmap_overlay(const std::string& path, const Tensor& image,
                          const Tensor& map) {
  require_map(map, "save_heatmap_overlay");
  if (image.rank() != 3)
    throw ConfigError("save_heatmap_overlay: image must be rank 3 [C,H,W], got " +
                      shape_str(image.shape()));
  Tensor up = upsample_bilinear(map, image.dim(1), image.dim(2));
  save_ppm(path, overlay_heatmap(image, up));
}

}  // namespace attnet
