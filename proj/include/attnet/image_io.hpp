#ifndef ATTNET_IMAGE_IO_HPP_
#define ATTNET_IMAGE_IO_HPP_

#include <string>

#include "attnet/tensor.hpp"

namespace attnet {

// 8-bit binary PGM (P5). gray is [H,W] with values in [0,1]; out-of-range
// values are clipped, then rounded to [0,255].
void save_pgm(const std::string& path, const Tensor& gray);
// Returns [H,W] with values in [0,1].
Tensor load_pgm(const std::string& path);

// 8-bit binary PPM (P6). rgb is [3,H,W] in [0,1].
void save_ppm(const std::string& path, const Tensor& rgb);
// Returns [3,H,W] in [0,1].
Tensor load_ppm(const std::string& path);

// Binary mask {0,255} as PGM. mask is [H,W]; values > 0.5 are foreground.
void save_mask_pgm(const std::string& path, const Tensor& mask);
// Returns [H,W] with entries exactly 0.0 or 1.0 (threshold at 128).
Tensor load_mask_pgm(const std::string& path);

// Maps v in [0,1] to the jet colormap (blue -> cyan -> yellow -> red).
void jet_color(double v, double* r, double* g, double* b);

// 0.5*image + 0.5*jet(map) per pixel. image [3,H,W] or [1,H,W] in [0,1],
// map [H,W] in [0,1]; returns [3,H,W].
Tensor overlay_heatmap(const Tensor& image, const Tensor& map);

}  // namespace attnet

#endif  // ATTNET_IMAGE_IO_HPP_
