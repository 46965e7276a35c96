#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "biomass/errors.hpp"

namespace biomass {

// RGB image, row-major, values in [0, 1].
struct ImageTensor {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;  // height * width * 3

  ImageTensor() = default;
  ImageTensor(std::size_t h, std::size_t w) : height(h), width(w), values(h * w * 3, 0.f) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) {
    return values[(y * width + x) * 3 + c];
  }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return values[(y * width + x) * 3 + c];
  }

  void validate() const;
};

ImageTensor constant_image(std::size_t h, std::size_t w, float r, float g, float b);

// Box-filter ("area") resampling; exact averages for integer shrink ratios.
ImageTensor resize_area(const ImageTensor& img, std::size_t out_h, std::size_t out_w);

// Vertical split into left/right halves (odd widths give the extra column to
// the left), each area-resampled to view_size x view_size.
std::pair<ImageTensor, ImageTensor> split_views(const ImageTensor& img, std::size_t view_size);

ImageTensor hflip(const ImageTensor& img);

// Rotation about the image center, bilinear sampling, reflect-101 border fill.
ImageTensor rotate_deg(const ImageTensor& img, double degrees);

// Multiplicative brightness, then contrast about the per-image mean; clamped.
ImageTensor brightness_contrast(const ImageTensor& img, double brightness, double contrast);

// Binary PPM (P6, maxval 255) round-trip with 8-bit quantization.
void write_ppm(const std::string& path, const ImageTensor& img);
ImageTensor read_ppm(const std::string& path);

}  // namespace biomass
