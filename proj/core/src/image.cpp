#include "spotdiff/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "spotdiff/error.hpp"

namespace spotdiff {

ImageTensor::ImageTensor(int height, int width, int channels)
    : height_(height), width_(width), channels_(channels),
      pixels_(static_cast<std::size_t>(height) * width * channels, 0.0) {
  if (height <= 0 || width <= 0 || channels <= 0) throw ConfigError("image dimensions must be positive");
}

ImageTensor::ImageTensor(int height, int width, int channels, std::vector<double> pixels)
    : height_(height), width_(width), channels_(channels), pixels_(std::move(pixels)) {
  if (height <= 0 || width <= 0 || channels <= 0) throw ConfigError("image dimensions must be positive");
  if (pixels_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw ConfigError("image pixel count does not match dimensions");
  }
}

void ImageTensor::validate() const {
  for (double v : pixels_) {
    if (!std::isfinite(v)) throw InputError("image contains non-finite pixels");
    if (v < 0.0 || v > 1.0) throw InputError("image pixel outside [0,1]");
  }
}

Tensor to_batch(std::span<const ImageTensor> images) {
  if (images.empty()) throw ConfigError("to_batch: empty image list");
  const int h = images[0].height(), w = images[0].width(), c = images[0].channels();
  std::vector<double> values(images.size() * static_cast<std::size_t>(h) * w * c);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const ImageTensor& img = images[n];
    if (img.height() != h || img.width() != w || img.channels() != c) {
      throw ConfigError("to_batch: images differ in shape");
    }
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          values[((n * c + ch) * h + y) * w + x] = img.at(y, x, ch);
  }
  return Tensor::from({static_cast<int>(images.size()), c, h, w}, std::move(values));
}

Tensor to_batch(const ImageTensor& image) { return to_batch(std::span<const ImageTensor>(&image, 1)); }

ImageTensor from_batch(const Tensor& batch, int index) {
  const int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  ImageTensor img(h, w, c);
  auto v = batch.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double p = v[((static_cast<std::size_t>(index) * c + ch) * h + y) * w + x];
        img.at(y, x, ch) = std::clamp(std::isfinite(p) ? p : 0.0, 0.0, 1.0);
      }
  return img;
}

double pixel_mse(const ImageTensor& a, const ImageTensor& b) {
  if (a.size() != b.size()) throw InputError("pixel_mse: image sizes differ");
  double acc = 0.0;
  auto pa = a.pixels(), pb = b.pixels();
  for (std::size_t i = 0; i < pa.size(); ++i) acc += (pa[i] - pb[i]) * (pa[i] - pb[i]);
  return acc / static_cast<double>(pa.size());
}

void quantize8(ImageTensor& image) {
  for (double& v : image.pixels()) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

void write_png(const std::string& path, const ImageTensor& image) {
  if (image.channels() != 3) throw ConfigError("write_png supports RGB images only");
  png_image desc;
  std::memset(&desc, 0, sizeof(desc));
  desc.version = PNG_IMAGE_VERSION;
  desc.width = static_cast<png_uint_32>(image.width());
  desc.height = static_cast<png_uint_32>(image.height());
  desc.format = PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(image.size());
  auto px = image.pixels();
  for (std::size_t i = 0; i < px.size(); ++i) {
    bytes[i] = static_cast<png_byte>(std::lround(std::clamp(px[i], 0.0, 1.0) * 255.0));
  }
  if (!png_image_write_to_file(&desc, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw PersistenceError("cannot write PNG " + path + ": " + desc.message);
  }
}

ImageTensor read_png(const std::string& path) {
  if (!std::filesystem::exists(path)) throw PersistenceError("missing image file " + path);
  png_image desc;
  std::memset(&desc, 0, sizeof(desc));
  desc.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&desc, path.c_str())) {
    throw CorruptCorpusError("cannot decode PNG " + path + ": " + desc.message);
  }
  desc.format = PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(desc));
  if (!png_image_finish_read(&desc, nullptr, bytes.data(), 0, nullptr)) {
    const std::string msg = desc.message;
    png_image_free(&desc);
    throw CorruptCorpusError("cannot decode PNG " + path + ": " + msg);
  }
  std::vector<double> pixels(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) pixels[i] = bytes[i] / 255.0;
  return ImageTensor(static_cast<int>(desc.height), static_cast<int>(desc.width), 3, std::move(pixels));
}

}  // namespace spotdiff
