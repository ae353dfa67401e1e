#include "attnet/data.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "attnet/errors.hpp"
#include "attnet/image_io.hpp"
#include "attnet/rng.hpp"

namespace attnet {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr int64_t kCifarHW = 32;
constexpr int64_t kCifarRecord = 1 + 3 * kCifarHW * kCifarHW;

uint8_t quantize_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<uint8_t>(std::lround(c * 255.0));
}

}  // namespace

Tensor LabeledImageSet::image(int64_t i) const {
  if (i < 0 || i >= size()) throw ShapeError("image index out of range");
  const int64_t chw = 3 * height() * width();
  Tensor out({3, height(), width()});
  for (int64_t k = 0; k < chw; ++k) out[k] = images[i * chw + k];
  return out;
}

void validate_set(const LabeledImageSet& set) {
  if (!set.images.empty()) {
    if (set.images.rank() != 4 || set.images.dim(1) != 3)
      throw ShapeError("image set must be [N,3,H,W], got " + shape_str(set.images.shape()));
  }
  const int64_t n = set.size();
  if (static_cast<int64_t>(set.labels.size()) != n)
    throw ConfigError("label list length " + std::to_string(set.labels.size()) +
                      " does not match image count " + std::to_string(n));
  for (int label : set.labels)
    if (label < 0) throw ConfigError("negative class id " + std::to_string(label));
  if (!set.boxes.empty() && static_cast<int64_t>(set.boxes.size()) != n)
    throw ConfigError("box list length does not match image count");
  if (!set.masks.empty() && static_cast<int64_t>(set.masks.size()) != n)
    throw ConfigError("mask list length does not match image count");
  const int64_t H = n > 0 ? set.height() : 0, W = n > 0 ? set.width() : 0;
  for (size_t i = 0; i < set.boxes.size(); ++i) {
    const Box& b = set.boxes[i];
    if (b.x < 0 || b.y < 0 || b.w < 1 || b.h < 1 || b.x + b.w > W || b.y + b.h > H)
      throw ConfigError("box " + std::to_string(i) + " leaves the image bounds");
  }
  for (size_t i = 0; i < set.masks.size(); ++i) {
    const Tensor& m = set.masks[i];
    if (m.rank() != 2 || m.dim(0) != H || m.dim(1) != W)
      throw ShapeError("mask " + std::to_string(i) + " must be [H,W]");
    for (int64_t r = 0; r < H; ++r)
      for (int64_t c = 0; c < W; ++c) {
        const double v = m.at(r, c);
        if (v != 0.0 && v != 1.0)
          throw ConfigError("mask " + std::to_string(i) + " holds non-binary value");
        if (v == 1.0 && !set.boxes.empty()) {
          const Box& b = set.boxes[i];
          if (c < b.x || c >= b.x + b.w || r < b.y || r >= b.y + b.h)
            throw ConfigError("mask " + std::to_string(i) + " spills outside its box");
        }
      }
  }
}

LabeledImageSet subset(const LabeledImageSet& set, const std::vector<int64_t>& idx) {
  LabeledImageSet out;
  const int64_t n = static_cast<int64_t>(idx.size());
  if (n == 0) return out;
  const int64_t chw = 3 * set.height() * set.width();
  out.images = Tensor({n, 3, set.height(), set.width()});
  out.labels.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const int64_t src = idx[static_cast<size_t>(i)];
    if (src < 0 || src >= set.size()) throw ShapeError("subset index out of range");
    for (int64_t k = 0; k < chw; ++k) out.images[i * chw + k] = set.images[src * chw + k];
    out.labels[static_cast<size_t>(i)] = set.labels[static_cast<size_t>(src)];
    if (!set.boxes.empty()) out.boxes.push_back(set.boxes[static_cast<size_t>(src)]);
    if (!set.masks.empty()) out.masks.push_back(set.masks[static_cast<size_t>(src)]);
  }
  return out;
}

LabeledImageSet load_cifar_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  const int64_t len = static_cast<int64_t>(bytes.size());
  if (len % kCifarRecord != 0)
    throw IoError(path + ": length " + std::to_string(len) + " is not a multiple of " +
                  std::to_string(kCifarRecord));
  const int64_t n = len / kCifarRecord;
  LabeledImageSet set;
  if (n == 0) return set;
  set.images = Tensor({n, 3, kCifarHW, kCifarHW});
  set.labels.resize(static_cast<size_t>(n));
  const int64_t chw = 3 * kCifarHW * kCifarHW;
  for (int64_t i = 0; i < n; ++i) {
    const uint8_t* rec = reinterpret_cast<const uint8_t*>(bytes.data()) + i * kCifarRecord;
    if (rec[0] > 9)
      throw IoError(path + ": record " + std::to_string(i) + " has label byte " +
                    std::to_string(rec[0]) + " > 9");
    set.labels[static_cast<size_t>(i)] = rec[0];
    for (int64_t k = 0; k < chw; ++k)
      set.images[i * chw + k] = static_cast<double>(rec[1 + k]) / 255.0;
  }
  return set;
}

void save_cifar_binary(const std::string& path, const LabeledImageSet& set) {
  if (set.size() > 0 &&
      (set.images.rank() != 4 || set.images.dim(1) != 3 || set.images.dim(2) != kCifarHW ||
       set.images.dim(3) != kCifarHW))
    throw ShapeError("CIFAR writer needs [N,3,32,32] images, got " +
                     shape_str(set.images.shape()));
  if (static_cast<int64_t>(set.labels.size()) != set.size())
    throw ConfigError("label list length does not match image count");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  const int64_t chw = 3 * kCifarHW * kCifarHW;
  for (int64_t i = 0; i < set.size(); ++i) {
    const int label = set.labels[static_cast<size_t>(i)];
    if (label < 0 || label > 9)
      throw ConfigError("CIFAR label " + std::to_string(label) + " outside 0..9");
    const uint8_t lb = static_cast<uint8_t>(label);
    out.write(reinterpret_cast<const char*>(&lb), 1);
    for (int64_t k = 0; k < chw; ++k) {
      const uint8_t b = quantize_byte(set.images[i * chw + k]);
      out.write(reinterpret_cast<const char*>(&b), 1);
    }
  }
  if (!out) throw IoError("short write to " + path);
}

NormalizationStats fit_normalization(const LabeledImageSet& set, bool with_zca,
                                     double zca_eps) {
  const int64_t n = set.size();
  if (n < 2) throw ConfigError("fit_normalization needs at least 2 images");
  if (zca_eps <= 0.0) throw ConfigError("zca_eps must be positive");
  const int64_t H = set.height(), W = set.width(), hw = H * W;
  NormalizationStats stats;
  stats.mean.assign(3, 0.0);
  stats.std.assign(3, 0.0);
  for (int64_t c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t k = 0; k < hw; ++k) {
        const double v = set.images[(i * 3 + c) * hw + k];
        sum += v;
        sq += v * v;
      }
    const double count = static_cast<double>(n * hw);
    const double mean = sum / count;
    const double var = sq / count - mean * mean;
    if (var <= 0.0)
      throw NumericError("channel " + std::to_string(c) + " has zero variance");
    stats.mean[static_cast<size_t>(c)] = mean;
    stats.std[static_cast<size_t>(c)] = std::sqrt(var);
  }
  if (!with_zca) return stats;

  const int64_t d = 3 * hw;
  Eigen::Map<const MatRM> X(set.images.data(), n, d);
  Eigen::VectorXd m = X.colwise().mean().transpose();
  MatRM centered = X.rowwise() - m.transpose();
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success)
    throw NumericError("covariance eigendecomposition failed");
  const Eigen::VectorXd lam = eig.eigenvalues();
  const Eigen::MatrixXd& U = eig.eigenvectors();
  Eigen::VectorXd wht(d), col(d);
  for (int64_t i = 0; i < d; ++i) {
    const double l = std::max(lam[i], 0.0);  // clip tiny negative round-off
    wht[i] = 1.0 / std::sqrt(l + zca_eps);
    col[i] = std::sqrt(l + zca_eps);
  }
  Eigen::MatrixXd Wm = U * wht.asDiagonal() * U.transpose();
  Eigen::MatrixXd Wi = U * col.asDiagonal() * U.transpose();

  stats.has_zca = true;
  stats.height = H;
  stats.width = W;
  stats.zca_mean = Tensor({d});
  for (int64_t i = 0; i < d; ++i) stats.zca_mean[i] = m[i];
  stats.zca = Tensor({d, d});
  stats.zca_inv = Tensor({d, d});
  Eigen::Map<MatRM>(stats.zca.data(), d, d) = Wm;
  Eigen::Map<MatRM>(stats.zca_inv.data(), d, d) = Wi;
  return stats;
}

namespace {

void check_norm_input(const Tensor& images, const NormalizationStats& stats, bool use_zca) {
  if (images.rank() != 4 || images.dim(1) != 3)
    throw ShapeError("normalize expects [N,3,H,W], got " + shape_str(images.shape()));
  if (use_zca) {
    if (!stats.has_zca) throw ConfigError("stats carry no ZCA matrices");
    if (images.dim(2) != stats.height || images.dim(3) != stats.width)
      throw ShapeError("ZCA was fit on " + std::to_string(stats.height) + "x" +
                       std::to_string(stats.width) + " images");
  } else if (stats.mean.size() != 3 || stats.std.size() != 3) {
    throw ConfigError("stats carry no per-channel mean/std");
  }
}

Tensor apply_zca(const Tensor& images, const NormalizationStats& stats, bool inverse) {
  const int64_t n = images.dim(0), d = 3 * images.dim(2) * images.dim(3);
  Tensor out(images.shape());
  Eigen::Map<const MatRM> X(images.data(), n, d);
  Eigen::Map<const MatRM> W((inverse ? stats.zca_inv : stats.zca).data(), d, d);
  Eigen::Map<const Eigen::VectorXd> m(stats.zca_mean.data(), d);
  Eigen::Map<MatRM> Y(out.data(), n, d);
  if (inverse)
    Y = (X * W).rowwise() + m.transpose();
  else
    Y = (X.rowwise() - m.transpose()) * W;
  return out;
}

}  // namespace

Tensor normalize(const Tensor& images, const NormalizationStats& stats, bool use_zca) {
  check_norm_input(images, stats, use_zca);
  if (use_zca) return apply_zca(images, stats, false);
  Tensor out(images.shape());
  const int64_t n = images.dim(0), hw = images.dim(2) * images.dim(3);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t c = 0; c < 3; ++c) {
      const double mean = stats.mean[static_cast<size_t>(c)];
      const double sd = stats.std[static_cast<size_t>(c)];
      for (int64_t k = 0; k < hw; ++k) {
        const int64_t idx = (i * 3 + c) * hw + k;
        out[idx] = (images[idx] - mean) / sd;
      }
    }
  return out;
}

Tensor denormalize(const Tensor& images, const NormalizationStats& stats, bool use_zca) {
  check_norm_input(images, stats, use_zca);
  if (use_zca) return apply_zca(images, stats, true);
  Tensor out(images.shape());
  const int64_t n = images.dim(0), hw = images.dim(2) * images.dim(3);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t c = 0; c < 3; ++c) {
      const double mean = stats.mean[static_cast<size_t>(c)];
      const double sd = stats.std[static_cast<size_t>(c)];
      for (int64_t k = 0; k < hw; ++k) {
        const int64_t idx = (i * 3 + c) * hw + k;
        out[idx] = images[idx] * sd + mean;
      }
    }
  return out;
}

std::pair<std::vector<double>, std::vector<double>> channel_scale_shift(
    const NormalizationStats& stats) {
  std::vector<double> scale(3), shift(3);
  for (size_t c = 0; c < 3; ++c) {
    scale[c] = 1.0 / stats.std[c];
    shift[c] = -stats.mean[c] / stats.std[c];
  }
  return {scale, shift};
}

namespace {

// The ten procedural glyph shapes, evaluated on slot-normalized coordinates
// u, v in (-0.5, 0.5).
bool glyph_hit(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const double r2 = u * u + v * v;
  switch (shape) {
    case 0: return au <= 0.4 && av <= 0.4;                        // square
    case 1: return r2 <= 0.45 * 0.45;                             // disk
    case 2: return r2 <= 0.45 * 0.45 && r2 >= 0.25 * 0.25;        // ring
    case 3: return v >= -0.4 && v <= 0.4 && au <= (v + 0.4) * 0.5625;  // triangle
    case 4: return (au <= 0.15 && av <= 0.45) || (av <= 0.15 && au <= 0.45);  // plus
    case 5: return std::abs(au - av) <= 0.11 && au <= 0.45 && av <= 0.45;     // X
    case 6: {  // horizontal stripes
      if (au > 0.45 || av > 0.45) return false;
      const int band = static_cast<int>((v + 0.45) / 0.9 * 5.0);
      return band % 2 == 0;
    }
    case 7: {  // 3x3 checkerboard
      if (au > 0.45 || av > 0.45) return false;
      const int cu = static_cast<int>((u + 0.45) / 0.3);
      const int cv = static_cast<int>((v + 0.45) / 0.3);
      return (cu + cv) % 2 == 0;
    }
    case 8: return au + av <= 0.45;                               // diamond
    default: return std::max(au, av) <= 0.45 && std::max(au, av) >= 0.28;  // frame
  }
}

constexpr double kPalette[10][3] = {
    {1.0, 0.1, 0.1},  // red
    {0.1, 0.9, 0.1},  // green
    {0.15, 0.3, 1.0}, // blue
    {1.0, 0.9, 0.1},  // yellow
    {0.9, 0.1, 0.9},  // magenta
    {0.1, 0.9, 0.9},  // cyan
    {1.0, 0.55, 0.1}, // orange
    {0.55, 0.15, 0.9},// purple
    {0.95, 0.95, 0.95},// white
    {0.1, 0.55, 0.45},// teal
};

// Paints shape in color over img ([3,H,W]) with its slot's top-left corner at
// (x0, y0); returns the support pixels it touched.
std::vector<std::pair<int64_t, int64_t>> paint_glyph(Tensor& img, int shape,
                                                     const double color[3], int64_t y0,
                                                     int64_t x0, int64_t s) {
  const int64_t H = img.dim(1), W = img.dim(2);
  std::vector<std::pair<int64_t, int64_t>> support;
  for (int64_t r = 0; r < s; ++r)
    for (int64_t c = 0; c < s; ++c) {
      const double u = (static_cast<double>(c) + 0.5) / static_cast<double>(s) - 0.5;
      const double v = (static_cast<double>(r) + 0.5) / static_cast<double>(s) - 0.5;
      if (!glyph_hit(shape, u, v)) continue;
      const int64_t rr = y0 + r, cc = x0 + c;
      if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
      for (int64_t ch = 0; ch < 3; ++ch) img.at(ch, rr, cc) = color[ch];
      support.emplace_back(rr, cc);
    }
  return support;
}

}  // namespace

LabeledImageSet synth_clutter(int64_t num, int64_t classes, int64_t canvas,
                              int64_t object_size, double clutter_density, uint64_t seed) {
  if (classes < 2 || classes > 10)
    throw ConfigError("synth_clutter supports 2..10 classes, got " + std::to_string(classes));
  if (object_size < 4 || object_size >= canvas)
    throw ConfigError("synth_clutter needs 4 <= object_size < canvas");
  if (num < 0 || clutter_density < 0.0)
    throw ConfigError("synth_clutter needs num >= 0 and clutter_density >= 0");

  LabeledImageSet set;
  if (num == 0) return set;
  set.images = Tensor({num, 3, canvas, canvas});
  set.labels.resize(static_cast<size_t>(num));
  set.boxes.resize(static_cast<size_t>(num));
  set.masks.reserve(static_cast<size_t>(num));

  Rng rng(seed);
  const int64_t slots = (canvas / object_size) * (canvas / object_size);
  const int64_t n_distract = std::llround(clutter_density * static_cast<double>(slots));

  for (int64_t i = 0; i < num; ++i) {
    const int label = static_cast<int>(i % classes);
    set.labels[static_cast<size_t>(i)] = label;
    Tensor img = Tensor::full({3, canvas, canvas}, 0.5);

    for (int64_t dcount = 0; dcount < n_distract; ++dcount) {
      // Off-diagonal (shape, color) pairs only: clutter never shows a class
      // conjunction, whatever the label.
      const int shape = static_cast<int>(rng.uniform_int(0, 9));
      int color = static_cast<int>(rng.uniform_int(0, 8));
      if (color >= shape) ++color;
      const int64_t s = rng.uniform_int(object_size / 2, object_size);
      const int64_t x = rng.uniform_int(0, canvas - s);
      const int64_t y = rng.uniform_int(0, canvas - s);
      paint_glyph(img, shape, kPalette[color], y, x, s);
    }
    if (clutter_density > 0.0) {
      for (int64_t k = 0; k < img.numel(); ++k) {
        img[k] = std::clamp(img[k] + rng.uniform(-0.04, 0.04), 0.0, 1.0);
      }
    }

    const int64_t gx = rng.uniform_int(0, canvas - object_size);
    const int64_t gy = rng.uniform_int(0, canvas - object_size);
    const auto support = paint_glyph(img, label, kPalette[label], gy, gx, object_size);

    Tensor mask = Tensor::zeros({canvas, canvas});
    int64_t min_r = canvas, max_r = -1, min_c = canvas, max_c = -1;
    for (const auto& [r, c] : support) {
      mask.at(r, c) = 1.0;
      min_r = std::min(min_r, r);
      max_r = std::max(max_r, r);
      min_c = std::min(min_c, c);
      max_c = std::max(max_c, c);
    }
    set.boxes[static_cast<size_t>(i)] = {min_c, min_r, max_c - min_c + 1, max_r - min_r + 1};
    set.masks.push_back(std::move(mask));

    const int64_t chw = 3 * canvas * canvas;
    for (int64_t k = 0; k < chw; ++k) set.images[i * chw + k] = img[k];
  }
  return set;
}

Tensor augment(const Tensor& batch, bool flip, int64_t crop_pad, uint64_t seed) {
  if (batch.rank() != 4)
    throw ShapeError("augment expects [N,C,H,W], got " + shape_str(batch.shape()));
  if (crop_pad < 0) throw ConfigError("crop_pad must be >= 0");
  const int64_t n = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  Tensor out(batch.shape());
  Rng rng(seed);
  for (int64_t i = 0; i < n; ++i) {
    const bool do_flip = flip && rng.uniform() < 0.5;
    int64_t dy = 0, dx = 0;
    if (crop_pad > 0) {
      dy = rng.uniform_int(0, 2 * crop_pad);
      dx = rng.uniform_int(0, 2 * crop_pad);
    }
    for (int64_t c = 0; c < C; ++c)
      for (int64_t r = 0; r < H; ++r)
        for (int64_t col = 0; col < W; ++col) {
          // Source coordinates inside the zero-padded frame.
          const int64_t sr = r + dy - crop_pad;
          int64_t sc = col + dx - crop_pad;
          if (do_flip && sc >= 0 && sc < W) sc = W - 1 - sc;
          double v = 0.0;
          if (sr >= 0 && sr < H && sc >= 0 && sc < W) v = batch.at(i, c, sr, sc);
          out.at(i, c, r, col) = v;
        }
  }
  return out;
}

void save_dataset(const std::string& dir, const LabeledImageSet& set, const std::string& stem) {
  namespace fs = std::filesystem;
  validate_set(set);
  fs::create_directories(fs::path(dir) / "images");
  std::ostringstream manifest;
  for (int64_t i = 0; i < set.size(); ++i) {
    char num[24];
    std::snprintf(num, sizeof(num), "%05lld", static_cast<long long>(i));
    const std::string base = stem + "_" + num;
    const std::string rel = "images/" + base + ".ppm";
    save_ppm((fs::path(dir) / rel).string(), set.image(i));
    if (!set.masks.empty())
      save_mask_pgm((fs::path(dir) / "images" / (base + "_mask.pgm")).string(),
                    set.masks[static_cast<size_t>(i)]);
    manifest << rel << " " << set.labels[static_cast<size_t>(i)];
    if (!set.boxes.empty()) {
      const Box& b = set.boxes[static_cast<size_t>(i)];
      manifest << " " << b.x << "," << b.y << "," << b.w << "," << b.h;
    }
    manifest << "\n";
  }
  std::ofstream out(fs::path(dir) / "manifest.txt");
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << manifest.str();
}

LabeledImageSet load_dataset(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();

  struct Row {
    std::string path;
    int label;
    bool has_box;
    Box box;
  };
  std::vector<Row> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    Row row{};
    if (!(ls >> row.path)) continue;  // blank line
    if (!(ls >> row.label))
      throw IoError(manifest_path + ":" + std::to_string(lineno) + ": missing label");
    std::string boxspec;
    if (ls >> boxspec) {
      long long x, y, w, h;
      if (std::sscanf(boxspec.c_str(), "%lld,%lld,%lld,%lld", &x, &y, &w, &h) != 4)
        throw IoError(manifest_path + ":" + std::to_string(lineno) + ": malformed box '" +
                      boxspec + "'");
      row.has_box = true;
      row.box = {x, y, w, h};
    }
    rows.push_back(std::move(row));
  }

  LabeledImageSet set;
  if (rows.empty()) return set;
  bool all_boxes = true, any_boxes = false;
  for (const Row& r : rows) {
    all_boxes = all_boxes && r.has_box;
    any_boxes = any_boxes || r.has_box;
  }
  if (any_boxes && !all_boxes)
    throw IoError(manifest_path + ": some records carry boxes and some do not");

  for (size_t i = 0; i < rows.size(); ++i) {
    Tensor img = load_ppm((root / rows[i].path).string());
    if (i == 0)
      set.images = Tensor({static_cast<int64_t>(rows.size()), 3, img.dim(1), img.dim(2)});
    else if (img.dim(1) != set.images.dim(2) || img.dim(2) != set.images.dim(3))
      throw IoError(manifest_path + ": record " + std::to_string(i) +
                    " has a different image size");
    const int64_t chw = img.numel();
    for (int64_t k = 0; k < chw; ++k) set.images[static_cast<int64_t>(i) * chw + k] = img[k];
    set.labels.push_back(rows[i].label);
    if (all_boxes) set.boxes.push_back(rows[i].box);

    fs::path mask_path = root / rows[i].path;
    mask_path.replace_extension();
    mask_path += "_mask.pgm";
    if (fs::exists(mask_path)) set.masks.push_back(load_mask_pgm(mask_path.string()));
  }
  if (!set.masks.empty() && set.masks.size() != rows.size())
    throw IoError(manifest_path + ": some records carry masks and some do not");
  validate_set(set);
  return set;
}

}  // namespace attnet
