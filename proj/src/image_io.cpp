#include "attnet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>

#include "attnet/errors.hpp"

namespace attnet {

namespace {

unsigned char to_byte(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(v * 255.0));
}

// Reads one whitespace-delimited token, skipping '#' comment lines.
std::string next_token(std::istream& is) {
  std::string tok;
  for (;;) {
    int c = is.get();
    if (c == EOF) {
      if (tok.empty()) throw IoError("truncated netpbm header");
      return tok;
    }
    if (c == '#') {
      std::string junk;
      std::getline(is, junk);
      c = ' ';
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
}

struct PnmHeader {
  int64_t w = 0, h = 0, maxval = 0;
};

PnmHeader read_header(std::istream& is, const std::string& magic, const std::string& path) {
  std::string m = next_token(is);
  if (m != magic)
    throw IoError("bad netpbm magic in " + path + ": got " + m + ", expected " + magic);
  PnmHeader hd;
  try {
    hd.w = std::stoll(next_token(is));
    hd.h = std::stoll(next_token(is));
    hd.maxval = std::stoll(next_token(is));
  } catch (const std::exception&) {
    throw IoError("malformed netpbm header in " + path);
  }
  if (hd.w <= 0 || hd.h <= 0) throw IoError("non-positive netpbm extent in " + path);
  if (hd.maxval != 255) throw IoError("unsupported netpbm maxval in " + path + " (want 255)");
  return hd;
}

void read_payload(std::istream& is, std::vector<unsigned char>& buf, const std::string& path) {
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<size_t>(is.gcount()) != buf.size())
    throw IoError("truncated netpbm payload in " + path);
}

}  // namespace

void save_pgm(const std::string& path, const Tensor& gray) {
  if (gray.rank() != 2)
    throw ShapeError("save_pgm: image must be rank 2, got " + shape_str(gray.shape()));
  const int64_t H = gray.dim(0), W = gray.dim(1);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "P5\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(W));
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x) row[static_cast<size_t>(x)] = to_byte(gray.at(y, x));
    os.write(reinterpret_cast<const char*>(row.data()), W);
  }
  if (!os) throw IoError("write failed: " + path);
}

Tensor load_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  PnmHeader hd = read_header(is, "P5", path);
  std::vector<unsigned char> buf(static_cast<size_t>(hd.w * hd.h));
  read_payload(is, buf, path);
  Tensor t({hd.h, hd.w});
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<double>(buf[static_cast<size_t>(i)]) / 255.0;
  return t;
}

void save_ppm(const std::string& path, const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3)
    throw ShapeError("save_ppm: image must be [3,H,W], got " + shape_str(rgb.shape()));
  const int64_t H = rgb.dim(1), W = rgb.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(3 * W));
  for (int64_t y = 0; y < H; ++y) {
    for (int64_t x = 0; x < W; ++x)
      for (int64_t c = 0; c < 3; ++c)
        row[static_cast<size_t>(3 * x + c)] = to_byte(rgb.at(c, y, x));
    os.write(reinterpret_cast<const char*>(row.data()), 3 * W);
  }
  if (!os) throw IoError("write failed: " + path);
}

Tensor load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  PnmHeader hd = read_header(is, "P6", path);
  std::vector<unsigned char> buf(static_cast<size_t>(3 * hd.w * hd.h));
  read_payload(is, buf, path);
  Tensor t({3, hd.h, hd.w});
  for (int64_t y = 0; y < hd.h; ++y)
    for (int64_t x = 0; x < hd.w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        t.at(c, y, x) = static_cast<double>(buf[static_cast<size_t>(3 * (y * hd.w + x) + c)]) / 255.0;
  return t;
}

void save_mask_pgm(const std::string& path, const Tensor& mask) {
  if (mask.rank() != 2)
    throw ShapeError("save_mask_pgm: mask must be rank 2, got " + shape_str(mask.shape()));
  Tensor bin(mask.shape());
  for (int64_t i = 0; i < mask.numel(); ++i) bin[i] = mask[i] > 0.5 ? 1.0 : 0.0;
  save_pgm(path, bin);
}

Tensor load_mask_pgm(const std::string& path) {
  Tensor g = load_pgm(path);
  for (int64_t i = 0; i < g.numel(); ++i) g[i] = g[i] >= 128.0 / 255.0 ? 1.0 : 0.0;
  return g;
}

void jet_color(double v, double* r, double* g, double* b) {
  v = std::clamp(v, 0.0, 1.0);
  *r = std::clamp(1.5 - std::abs(4.0 * v - 3.0), 0.0, 1.0);
  *g = std::clamp(1.5 - std::abs(4.0 * v - 2.0), 0.0, 1.0);
  *b = std::clamp(1.5 - std::abs(4.0 * v - 1.0), 0.0, 1.0);
}

Tensor overlay_heatmap(const Tensor& image, const Tensor& map) {
  if (image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1))
    throw ShapeError("overlay_heatmap: image must be [3,H,W] or [1,H,W], got " +
                     shape_str(image.shape()));
  if (map.rank() != 2)
    throw ShapeError("overlay_heatmap: map must be rank 2, got " + shape_str(map.shape()));
  const int64_t H = image.dim(1), W = image.dim(2);
  if (map.dim(0) != H || map.dim(1) != W)
    throw ShapeError("overlay_heatmap: map extent mismatch, image " + shape_str(image.shape()) +
                     " vs map " + shape_str(map.shape()));
  Tensor out({3, H, W});
  const bool mono = image.dim(0) == 1;
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double r, g, b;
      jet_color(map.at(y, x), &r, &g, &b);
      const double ir = image.at(0, y, x);
      const double ig = mono ? ir : image.at(1, y, x);
      const double ib = mono ? ir : image.at(2, y, x);
      out.at(0, y, x) = 0.5 * ir + 0.5 * r;
      out.at(1, y, x) = 0.5 * ig + 0.5 * g;
      out.at(2, y, x) = 0.5 * ib + 0.5 * b;
    }
  return out;
}

}  // namespace attnet
