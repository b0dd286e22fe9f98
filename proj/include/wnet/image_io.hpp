#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "wnet/tensor.hpp"

namespace wnet {

class ImageIOError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decoded PNG samples, interleaved, at their stored bit depth (8 or 16).
struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;  ///< 1 gray, 3 RGB (alpha is dropped, palettes expanded)
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;

  double max_value() const { return bit_depth == 16 ? 65535.0 : 255.0; }
};

PngImage read_png(const std::filesystem::path& path);
/// `channels` 1 or 3, `bit_depth` 8 or 16.
void write_png(const std::filesystem::path& path, const PngImage& img);

/// (1, C, H, W) tensor with samples scaled to [0, 1] by the bit-depth maximum.
Tensor png_to_tensor(const PngImage& img);
/// Clamps to [0, 1] and quantizes with round-to-nearest. Expects N == 1 and
/// C of 1 or 3.
PngImage tensor_to_png(const Tensor& t, int bit_depth = 8);

}  // namespace wnet
