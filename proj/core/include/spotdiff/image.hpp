#pragma once

#include <span>
#include <string>
#include <vector>

#include "spotdiff/tensor.hpp"

namespace spotdiff {

/// H x W x C image with values in [0,1], stored row-major HWC.
class ImageTensor {
 public:
  ImageTensor() = default;
  ImageTensor(int height, int width, int channels);
  ImageTensor(int height, int width, int channels, std::vector<double> pixels);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return pixels_.size(); }

  double& at(int y, int x, int c) { return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c]; }
  double at(int y, int x, int c) const {
    return pixels_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  std::span<const double> pixels() const { return pixels_; }
  std::span<double> pixels() { return pixels_; }

  /// Throws InputError unless every entry is finite and inside [0,1].
  void validate() const;

  bool operator==(const ImageTensor& other) const = default;

 private:
  int height_ = 0, width_ = 0, channels_ = 0;
  std::vector<double> pixels_;
};

/// Stacks images into an NCHW batch tensor (no gradient).
Tensor to_batch(std::span<const ImageTensor> images);
Tensor to_batch(const ImageTensor& image);
/// Extracts element `index` of an NCHW batch, clamping into [0,1].
ImageTensor from_batch(const Tensor& batch, int index);

double pixel_mse(const ImageTensor& a, const ImageTensor& b);

/// 8-bit PNG I/O. Pixels are quantized to k/255 on write.
void write_png(const std::string& path, const ImageTensor& image);
/// Throws PersistenceError when the file is missing and CorruptCorpusError
/// when it exists but cannot be decoded.
ImageTensor read_png(const std::string& path);

/// Rounds every pixel to the nearest k/255 so PNG round-trips are exact.
void quantize8(ImageTensor& image);

}  // namespace spotdiff
