#include "refusion/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <vector>

namespace refusion::imageio {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<uint8_t>(std::lround(c * 255.0));
}

}  // namespace

Tensor rgb_to_lum(const Tensor& rgb) {
  const int64_t H = rgb.shape(1), W = rgb.shape(2);
  Tensor lum({H, W});
  const double* r = rgb.data();
  const double* g = r + H * W;
  const double* b = g + H * W;
  for (int64_t i = 0; i < H * W; ++i)
    lum.at(i) = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
  return lum;
}

Tensor rgb_to_chroma(const Tensor& rgb) {
  const int64_t H = rgb.shape(1), W = rgb.shape(2);
  Tensor ch({2, H, W});
  const double* r = rgb.data();
  const double* g = r + H * W;
  const double* b = g + H * W;
  for (int64_t i = 0; i < H * W; ++i) {
    const double y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
    ch.at(i) = (b[i] - y) / 1.772 + 0.5;           // Cb
    ch.at(H * W + i) = (r[i] - y) / 1.402 + 0.5;   // Cr
  }
  return ch;
}

Tensor ycbcr_to_rgb(const Tensor& lum, const Tensor& chroma) {
  const int64_t H = lum.shape(0), W = lum.shape(1);
  if (chroma.shape() != std::vector<int64_t>{2, H, W})
    throw ShapeError("ycbcr_to_rgb: chroma shape mismatch");
  Tensor rgb({3, H, W});
  const double* y = lum.data();
  const double* cb = chroma.data();
  const double* cr = cb + H * W;
  for (int64_t i = 0; i < H * W; ++i) {
    const double r = y[i] + 1.402 * (cr[i] - 0.5);
    const double b = y[i] + 1.772 * (cb[i] - 0.5);
    const double g = (y[i] - 0.299 * r - 0.114 * b) / 0.587;
    rgb.at(i) = std::clamp(r, 0.0, 1.0);
    rgb.at(H * W + i) = std::clamp(g, 0.0, 1.0);
    rgb.at(2 * H * W + i) = std::clamp(b, 0.0, 1.0);
  }
  return rgb;
}

LoadedImage read_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw IoError("cannot open image: " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng init failed");
  }

  std::vector<uint8_t> raw;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;
  int bit_depth = 0, color_type = 0, channels = 0;
  bool failed = false;

  if (setjmp(png_jmpbuf(png))) {
    failed = true;
  } else {
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_get_IHDR(png, info, &width, &height, &bit_depth, &color_type, nullptr, nullptr,
                 nullptr);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
      png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS))
      png_set_strip_alpha(png);
    png_read_update_info(png, info);

    bit_depth = png_get_bit_depth(png, info);
    channels = png_get_channels(png, info);
    const size_t rowbytes = png_get_rowbytes(png, info);
    raw.resize(rowbytes * height);
    rows.resize(height);
    for (png_uint_32 i = 0; i < height; ++i) rows[i] = raw.data() + i * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (failed) throw IoError("failed to decode PNG: " + path.string());
  if (channels != 1 && channels != 3)
    throw IoError("unsupported channel count in " + path.string());

  const int64_t H = height, W = width;
  const double scale = bit_depth == 16 ? 1.0 / 65535.0 : 1.0 / 255.0;
  auto sample = [&](int64_t i, int64_t j, int c) -> double {
    if (bit_depth == 16) {
      const size_t off = ((i * W + j) * channels + c) * 2;
      return ((raw[off] << 8) | raw[off + 1]) * scale;  // PNG is big-endian
    }
    return raw[(i * W + j) * channels + c] * scale;
  };

  LoadedImage out;
  out.bit_depth = bit_depth;
  if (channels == 1) {
    Tensor lum({H, W});
    for (int64_t i = 0; i < H; ++i)
      for (int64_t j = 0; j < W; ++j) lum.at(i * W + j) = sample(i, j, 0);
    out.lum = std::move(lum);
  } else {
    Tensor rgb({3, H, W});
    for (int c = 0; c < 3; ++c)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) rgb.at((c * H + i) * W + j) = sample(i, j, c);
    out.lum = rgb_to_lum(rgb);
    out.chroma = rgb_to_chroma(rgb);
  }
  return out;
}

namespace {

void write_png_impl(const std::filesystem::path& path, const uint8_t* data, int64_t H,
                    int64_t W, int channels) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw IoError("cannot open for write: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng init failed");
  }
  std::vector<png_bytep> rows(H);
  for (int64_t i = 0; i < H; ++i)
    rows[i] = const_cast<png_bytep>(data + i * W * channels);
  bool failed = false;
  if (setjmp(png_jmpbuf(png))) {
    failed = true;
  } else {
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
  if (failed) throw IoError("failed to encode PNG: " + path.string());
}

}  // namespace

void write_png_gray8(const std::filesystem::path& path, const Tensor& img) {
  if (img.ndim() != 2) throw ShapeError("write_png_gray8 expects [H,W]");
  const int64_t H = img.shape(0), W = img.shape(1);
  std::vector<uint8_t> bytes(static_cast<size_t>(H * W));
  for (int64_t i = 0; i < H * W; ++i) bytes[i] = to_byte(img.at(i));
  write_png_impl(path, bytes.data(), H, W, 1);
}

void write_png_rgb8(const std::filesystem::path& path, const Tensor& rgb) {
  if (rgb.ndim() != 3 || rgb.shape(0) != 3) throw ShapeError("write_png_rgb8 expects [3,H,W]");
  const int64_t H = rgb.shape(1), W = rgb.shape(2);
  std::vector<uint8_t> bytes(static_cast<size_t>(3 * H * W));
  for (int64_t i = 0; i < H * W; ++i)
    for (int c = 0; c < 3; ++c) bytes[i * 3 + c] = to_byte(rgb.at(c * H * W + i));
  write_png_impl(path, bytes.data(), H, W, 3);
}

}  // namespace refusion::imageio
