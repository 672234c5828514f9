#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pvatlas {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Interleaved 8-bit RGB image, row-major, top row first.
class RgbRaster {
 public:
  RgbRaster() = default;
  RgbRaster(int width, int height, Rgb fill = {});

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  bool empty() const noexcept { return width_ == 0 || height_ == 0; }

  Rgb at(int x, int y) const;
  void set(int x, int y, Rgb c);
  void fill_rect(int x0, int y0, int w, int h, Rgb c);

  /// Copy of the window [x0, x0+w) x [y0, y0+h).
  RgbRaster crop(int x0, int y0, int w, int h) const;
  /// Writes `src` with its top-left corner at (x0, y0).
  void blit(const RgbRaster& src, int x0, int y0);

  std::span<const std::uint8_t> bytes() const noexcept { return data_; }
  std::span<std::uint8_t> bytes() noexcept { return data_; }

  friend bool operator==(const RgbRaster&, const RgbRaster&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> data_;
};

/// SHA-256 over dimensions and pixel bytes; identifies a raster's content.
std::string pixel_digest(const RgbRaster& raster);

/// Lossless PNG encode (8-bit RGB). Throws Error{EncodeError} on empty rasters.
std::vector<std::uint8_t> encode_png(const RgbRaster& raster);

/// Decodes any PNG libpng understands into 8-bit RGB (alpha dropped).
/// Throws Error{DecodeError}.
RgbRaster decode_png(std::span<const std::uint8_t> bytes);

}  // namespace pvatlas
