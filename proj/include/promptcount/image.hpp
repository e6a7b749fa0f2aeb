#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace promptcount {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Interleaved 8-bit RGB raster, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, Rgb fill = {});

  Rgb at(int x, int y) const;
  void set(int x, int y, Rgb c);

  friend bool operator==(const Image&, const Image&) = default;
};

enum class ImageFormat { png, jpeg, unknown };

ImageFormat sniff_format(std::span<const std::uint8_t> bytes);

/// Decodes PNG or JPEG bytes into RGB. Throws ImageError on failure.
Image decode_image(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const Image& img);

Image read_image(const std::filesystem::path& path);
void write_png(const Image& img, const std::filesystem::path& path);

/// 64-bit FNV-1a over dimensions and pixels, rendered as 16 hex digits.
std::string content_key(const Image& img);

}  // namespace promptcount
