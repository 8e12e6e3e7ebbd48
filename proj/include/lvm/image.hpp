#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lvm {

/// RGB image, float pixels in [0,1], row-major [y][x][channel].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  bool same_dims(const Image& other) const {
    return height == other.height && width == other.width;
  }
};

/// Binary foreground mask, row-major.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// PPM (P6, 8-bit) dumps for generated images and contact sheets.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

/// Lays out images left to right with a 1-pixel divider; all must share dims.
Image contact_sheet(const std::vector<Image>& images);

/// Bilinear resample to (out_h, out_w). Equal dims degenerate to a copy.
Image resize_bilinear(const Image& src, int out_h, int out_w);

Image hflip(const Image& src);

}  // namespace lvm
