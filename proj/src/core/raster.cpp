#include "pvatlas/core/raster.hpp"

#include <png.h>

#include <algorithm>
#include <cstring>

#include "pvatlas/core/encoding.hpp"
#include "pvatlas/core/error.hpp"

namespace pvatlas {

RgbRaster::RgbRaster(int width, int height, Rgb fill) : width_(width), height_(height) {
  if (width < 0 || height < 0) {
    throw Error(ErrorCode::InvalidArgument, "negative raster dimensions");
  }
  data_.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < data_.size(); i += 3) {
    data_[i] = fill.r;
    data_[i + 1] = fill.g;
    data_[i + 2] = fill.b;
  }
}

Rgb RgbRaster::at(int x, int y) const {
  const std::size_t i = (static_cast<std::size_t>(y) * width_ + x) * 3;
  return {data_[i], data_[i + 1], data_[i + 2]};
}

void RgbRaster::set(int x, int y, Rgb c) {
  const std::size_t i = (static_cast<std::size_t>(y) * width_ + x) * 3;
  data_[i] = c.r;
  data_[i + 1] = c.g;
  data_[i + 2] = c.b;
}

void RgbRaster::fill_rect(int x0, int y0, int w, int h, Rgb c) {
  const int x1 = std::min(width_, x0 + w);
  const int y1 = std::min(height_, y0 + h);
  for (int y = std::max(0, y0); y < y1; ++y) {
    for (int x = std::max(0, x0); x < x1; ++x) set(x, y, c);
  }
}

RgbRaster RgbRaster::crop(int x0, int y0, int w, int h) const {
  if (x0 < 0 || y0 < 0 || w < 0 || h < 0 || x0 + w > width_ || y0 + h > height_) {
    throw Error(ErrorCode::InvalidArgument, "crop window outside raster");
  }
  RgbRaster out(w, h);
  const std::size_t row_bytes = static_cast<std::size_t>(w) * 3;
  for (int y = 0; y < h; ++y) {
    const std::size_t src = (static_cast<std::size_t>(y0 + y) * width_ + x0) * 3;
    std::memcpy(out.data_.data() + y * row_bytes, data_.data() + src, row_bytes);
  }
  return out;
}

void RgbRaster::blit(const RgbRaster& src, int x0, int y0) {
  if (x0 < 0 || y0 < 0 || x0 + src.width_ > width_ || y0 + src.height_ > height_) {
    throw Error(ErrorCode::InvalidArgument, "blit window outside raster");
  }
  const std::size_t row_bytes = static_cast<std::size_t>(src.width_) * 3;
  for (int y = 0; y < src.height_; ++y) {
    const std::size_t dst = (static_cast<std::size_t>(y0 + y) * width_ + x0) * 3;
    std::memcpy(data_.data() + dst, src.data_.data() + y * row_bytes, row_bytes);
  }
}

std::string pixel_digest(const RgbRaster& raster) {
  std::vector<std::uint8_t> buf(8);
  const auto put32 = [&](std::size_t off, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
  };
  put32(0, static_cast<std::uint32_t>(raster.width()));
  put32(4, static_cast<std::uint32_t>(raster.height()));
  buf.insert(buf.end(), raster.bytes().begin(), raster.bytes().end());
  return sha256_hex(buf);
}

std::vector<std::uint8_t> encode_png(const RgbRaster& raster) {
  if (raster.empty()) throw Error(ErrorCode::EncodeError, "cannot encode an empty raster");

  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(raster.width());
  image.height = static_cast<png_uint_32>(raster.height());
  image.format = PNG_FORMAT_RGB;

  png_alloc_size_t size = 0;
  const auto* pixels = raster.bytes().data();
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels, 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::EncodeError, "png sizing failed: " + msg);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels, 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::EncodeError, "png write failed: " + msg);
  }
  out.resize(size);
  return out;
}

RgbRaster decode_png(std::span<const std::uint8_t> bytes) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (bytes.empty() || !png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    std::string msg = bytes.empty() ? "empty buffer" : image.message;
    png_image_free(&image);
    throw Error(ErrorCode::DecodeError, "not a PNG image: " + msg);
  }
  image.format = PNG_FORMAT_RGB;
  RgbRaster out(static_cast<int>(image.width), static_cast<int>(image.height));
  if (!png_image_finish_read(&image, nullptr, out.bytes().data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::DecodeError, "png decode failed: " + msg);
  }
  return out;
}

}  // namespace pvatlas
