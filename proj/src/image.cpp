#include "nvs/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace nvs {

namespace {

using File = std::unique_ptr<std::FILE, int (*)(std::FILE*)>;

File open(const std::filesystem::path& path, const char* mode) {
  return File(std::fopen(path.c_str(), mode), &std::fclose);
}

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw std::runtime_error(msg); }
void png_warn(png_structp, png_const_charp) {}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  File f = open(path, "rb");
  if (!f) throw std::runtime_error("cannot open image " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  Image out;
  try {
    png_init_io(png, f.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const Index w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    if (png_get_channels(png, info) != 3) throw std::runtime_error("unsupported channel layout");
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(w * h * 3));
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (Index y = 0; y < h; ++y) rows[y] = buf.data() + y * w * 3;
    png_read_image(png, rows.data());
    out = Image({h, w, 3});
    for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<float>(buf[i]) / 255.0f;
  } catch (const std::exception& e) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("corrupt image " + path.string() + ": " + e.what());
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.rank() != 3 || image.dim(2) != 3) throw std::invalid_argument("write_png: expected (H, W, 3) image");
  File f = open(path, "wb");
  if (!f) throw std::runtime_error("cannot write image " + path.string());
  const Index h = image.dim(0), w = image.dim(1);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(image.size()));
  for (Index i = 0; i < image.size(); ++i) buf[i] = to_byte(image[i]);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  try {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (Index y = 0; y < h; ++y) png_write_row(png, buf.data() + y * w * 3);
    png_write_end(png, nullptr);
  } catch (const std::exception& e) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("failed writing " + path.string() + ": " + e.what());
  }
  png_destroy_write_struct(&png, &info);
}

Image quantize(const Image& image) {
  Image out(image.shape());
  for (Index i = 0; i < image.size(); ++i) out[i] = static_cast<float>(to_byte(image[i])) / 255.0f;
  return out;
}

}  // namespace nvs
