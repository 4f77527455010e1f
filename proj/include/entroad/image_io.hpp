#pragma once

// 8-bit grayscale heatmaps.

#include "entroad/error.hpp"
#include "entroad/tensor.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <vector>

namespace entroad {

// Values in [0,1] map to 0..255; `normalize` stretches min..max first.
template <class T>
std::vector<std::uint8_t> to_gray8(const Vec<T>& map, bool normalize = false) {
  double lo = 0.0, hi = 1.0;
  if (normalize && map.size() > 0) {
    lo = static_cast<double>(map.minCoeff());
    hi = static_cast<double>(map.maxCoeff());
  }
  const double span = hi - lo;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(map.size()));
  for (Eigen::Index i = 0; i < map.size(); ++i) {
    double v = span > 0.0 ? (static_cast<double>(map[i]) - lo) / span : 0.0;
    v = std::clamp(v, 0.0, 1.0);
    out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return out;
}

inline void write_png_gray8(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels, int h, int w) {
  if (h <= 0 || w <= 0 || pixels.size() != static_cast<std::size_t>(h) * w) {
    throw UsageError("PNG geometry does not match pixel count");
  }
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) {
    throw DataError("cannot write " + path.string());
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) {
    throw DataError("libpng initialization failed");
  }
  png_infop info = png_create_info_struct(png);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * w));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

template <class T>
void write_heatmap(const std::filesystem::path& path, const Vec<T>& map, int h, int w, bool normalize = false) {
  write_png_gray8(path, to_gray8<T>(map, normalize), h, w);
}

} // namespace entroad
