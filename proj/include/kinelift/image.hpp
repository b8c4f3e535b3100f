#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "kinelift/types.hpp"

// Frame preprocessing applied before any frame leaves the machine: gray-world
// white balance, CLAHE on the luma channel, and privacy blurring of supplied
// face boxes. Raster format is binary PPM (P6, maxval 255) so every stage is
// bit-exact without an image library.

namespace kinelift::img {

struct RasterImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // row-major RGB, width*height*3 bytes

  bool empty() const { return width == 0 || height == 0; }
  std::uint8_t& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

inline RasterImage make_image(int width, int height, std::uint8_t fill = 0) {
  RasterImage im;
  im.width = width;
  im.height = height;
  im.data.assign(static_cast<std::size_t>(width) * height * 3, fill);
  return im;
}

// --------------------------------------------------------------------------
// PPM (P6) I/O.

namespace detail {

inline int ppm_token(std::istream& in) {
  // Skips whitespace and '#' comments, then reads one unsigned integer.
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  if (c == EOF || !std::isdigit(c)) throw format_error("ppm: malformed header");
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}

}  // namespace detail

inline RasterImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("cannot open image: " + path);
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || m1 != '6') throw format_error("ppm: expected P6 magic in " + path);
  const int width = detail::ppm_token(in);
  const int height = detail::ppm_token(in);
  const int maxval = detail::ppm_token(in);
  if (maxval != 255) throw format_error("ppm: maxval must be 255 in " + path);
  RasterImage im = make_image(width, height);
  in.read(reinterpret_cast<char*>(im.data.data()), static_cast<std::streamsize>(im.data.size()));
  if (in.gcount() != static_cast<std::streamsize>(im.data.size()))
    throw format_error("ppm: truncated pixel data in " + path);
  return im;
}

inline void write_ppm(const RasterImage& im, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw input_error("cannot open for writing: " + path);
  out << "P6\n" << im.width << " " << im.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(im.data.data()), static_cast<std::streamsize>(im.data.size()));
}

// --------------------------------------------------------------------------
// Gray-world white balance: scale each channel by global_mean / channel_mean.
// Channels with zero mean are left alone. Idempotent up to rounding.

inline RasterImage gray_world(const RasterImage& im) {
  if (im.empty()) return im;
  const std::size_t pixels = static_cast<std::size_t>(im.width) * im.height;
  std::array<double, 3> sum{0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < pixels; ++i)
    for (int c = 0; c < 3; ++c) sum[c] += im.data[i * 3 + c];
  const double global_mean = (sum[0] + sum[1] + sum[2]) / (3.0 * pixels);
  std::array<double, 3> scale{};
  for (int c = 0; c < 3; ++c) {
    const double mean = sum[c] / static_cast<double>(pixels);
    scale[c] = mean > 0.0 ? global_mean / mean : 1.0;
  }
  RasterImage out = im;
  for (std::size_t i = 0; i < pixels; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::lround(im.data[i * 3 + c] * scale[c]);
      out.data[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
  }
  return out;
}

// --------------------------------------------------------------------------
// Luma/chroma decomposition with integer BT.601 weights (deterministic across
// platforms). Y weights 77/150/29 sum to 256 exactly, so gray stays gray.

namespace detail {

inline int luma(int r, int g, int b) { return (77 * r + 150 * g + 29 * b + 128) >> 8; }
inline int chroma_b(int r, int g, int b) { return ((-43 * r - 85 * g + 128 * b) >> 8) + 128; }
inline int chroma_r(int r, int g, int b) { return ((128 * r - 107 * g - 21 * b) >> 8) + 128; }

inline std::uint8_t clamp8(int v) { return static_cast<std::uint8_t>(std::clamp(v, 0, 255)); }

inline void recombine(int y, int cb, int cr, std::uint8_t* rgb) {
  rgb[0] = clamp8(y + ((359 * (cr - 128)) >> 8));
  rgb[1] = clamp8(y - ((88 * (cb - 128) + 183 * (cr - 128)) >> 8));
  rgb[2] = clamp8(y + ((454 * (cb - 128)) >> 8));
}

// Per-tile histogram-equalization LUT with clipping. The excess above the
// clip limit is redistributed uniformly; the mapping is the classic
// (cdf - cdf_min) / (n - cdf_min) * 255 rule.
inline std::array<std::uint8_t, 256> clahe_lut(const std::array<int, 256>& hist_in, int tile_pixels,
                                               double clip_limit) {
  std::array<int, 256> hist = hist_in;
  const int climit = std::max(1, static_cast<int>(clip_limit * tile_pixels / 256.0));
  long excess = 0;
  for (int i = 0; i < 256; ++i) {
    if (hist[i] > climit) {
      excess += hist[i] - climit;
      hist[i] = climit;
    }
  }
  const long per_bin = excess / 256;
  const int remainder = static_cast<int>(excess - per_bin * 256);
  for (int i = 0; i < 256; ++i) hist[i] += static_cast<int>(per_bin) + (i < remainder ? 1 : 0);

  std::array<std::uint8_t, 256> lut{};
  long cdf = 0;
  long cdf_min = -1;
  std::array<long, 256> cum{};
  for (int i = 0; i < 256; ++i) {
    cdf += hist[i];
    cum[i] = cdf;
    if (cdf_min < 0 && hist[i] > 0) cdf_min = cdf;
  }
  const long denom = tile_pixels - cdf_min;
  for (int i = 0; i < 256; ++i) {
    if (denom <= 0) {
      lut[i] = static_cast<std::uint8_t>(i);  // single occupied bin: identity
    } else {
      const double mapped = static_cast<double>(cum[i] - cdf_min) * 255.0 / static_cast<double>(denom);
      lut[i] = clamp8(static_cast<int>(std::lround(mapped)));
    }
  }
  return lut;
}

}  // namespace detail

// Contrast-limited adaptive histogram equalization on the luma channel, with
// bilinear blending of per-tile mappings and chroma carried through
// untouched.
inline RasterImage clahe(const RasterImage& im, int tiles_x = 8, int tiles_y = 8,
                         double clip_limit = 2.0) {
  if (im.empty()) return im;
  if (tiles_x < 1 || tiles_y < 1) throw input_error("clahe: tile grid must be at least 1x1");
  if (clip_limit <= 0.0) throw input_error("clahe: clip limit must be positive");
  tiles_x = std::min(tiles_x, im.width);
  tiles_y = std::min(tiles_y, im.height);

  const std::size_t pixels = static_cast<std::size_t>(im.width) * im.height;
  std::vector<std::uint8_t> ych(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    const std::uint8_t* p = &im.data[i * 3];
    ych[i] = static_cast<std::uint8_t>(detail::luma(p[0], p[1], p[2]));
  }

  // Tile boundaries at round(k * extent / tiles).
  auto bound = [](int extent, int tiles, int k) {
    return static_cast<int>(std::lround(static_cast<double>(k) * extent / tiles));
  };
  std::vector<std::array<std::uint8_t, 256>> luts(static_cast<std::size_t>(tiles_x) * tiles_y);
  std::vector<double> centers_x(tiles_x), centers_y(tiles_y);
  for (int ty = 0; ty < tiles_y; ++ty) {
    const int y0 = bound(im.height, tiles_y, ty), y1 = bound(im.height, tiles_y, ty + 1);
    for (int tx = 0; tx < tiles_x; ++tx) {
      const int x0 = bound(im.width, tiles_x, tx), x1 = bound(im.width, tiles_x, tx + 1);
      std::array<int, 256> hist{};
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) ++hist[ych[static_cast<std::size_t>(y) * im.width + x]];
      luts[static_cast<std::size_t>(ty) * tiles_x + tx] =
          detail::clahe_lut(hist, (x1 - x0) * (y1 - y0), clip_limit);
      centers_x[tx] = 0.5 * (x0 + x1 - 1);
      centers_y[ty] = 0.5 * (y0 + y1 - 1);
    }
  }

  // Bilinear interpolation between the four surrounding tile mappings.
  auto locate = [](const std::vector<double>& centers, double v, int& lo, double& w) {
    const int n = static_cast<int>(centers.size());
    if (v <= centers[0] || n == 1) { lo = 0; w = 0.0; return; }
    if (v >= centers[n - 1]) { lo = n - 2 >= 0 ? n - 2 : 0; w = 1.0; return; }
    int i = 0;
    while (i + 1 < n && centers[i + 1] < v) ++i;
    lo = i;
    w = (v - centers[i]) / (centers[i + 1] - centers[i]);
  };

  RasterImage out = im;
  for (int y = 0; y < im.height; ++y) {
    int ty;
    double wy;
    locate(centers_y, y, ty, wy);
    for (int x = 0; x < im.width; ++x) {
      int tx;
      double wx;
      locate(centers_x, x, tx, wx);
      const std::uint8_t v = ych[static_cast<std::size_t>(y) * im.width + x];
      auto lut_at = [&](int j, int i) -> double {
        return luts[static_cast<std::size_t>(std::min(j, tiles_y - 1)) * tiles_x +
                    std::min(i, tiles_x - 1)][v];
      };
      const double top = lut_at(ty, tx) * (1.0 - wx) + lut_at(ty, tx + 1) * wx;
      const double bot = lut_at(ty + 1, tx) * (1.0 - wx) + lut_at(ty + 1, tx + 1) * wx;
      const int ynew = detail::clamp8(static_cast<int>(std::lround(top * (1.0 - wy) + bot * wy)));

      const std::uint8_t* p = &im.data[(static_cast<std::size_t>(y) * im.width + x) * 3];
      const int cb = detail::chroma_b(p[0], p[1], p[2]);
      const int cr = detail::chroma_r(p[0], p[1], p[2]);
      detail::recombine(ynew, cb, cr, &out.data[(static_cast<std::size_t>(y) * im.width + x) * 3]);
    }
  }
  return out;
}

// --------------------------------------------------------------------------
// Gaussian blur restricted to boxes (face anonymization). Pixels outside the
// union of boxes are byte-identical to the input; samples are taken from the
// original image with clamp-to-edge, so a box over a constant region stays
// constant.

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

inline RasterImage blur_boxes(const RasterImage& im, const std::vector<Box>& boxes, double sigma = 6.0) {
  if (sigma <= 0.0) throw input_error("blur_boxes: sigma must be positive");
  if (im.empty() || boxes.empty()) return im;
  const auto kernel = gaussian_kernel(sigma);
  const int radius = static_cast<int>(kernel.size() / 2);

  RasterImage out = im;
  auto clampi = [](int v, int lo, int hi) { return std::max(lo, std::min(hi, v)); };
  for (const auto& b : boxes) {
    const int bx0 = clampi(static_cast<int>(std::floor(b.x0)), 0, im.width);
    const int by0 = clampi(static_cast<int>(std::floor(b.y0)), 0, im.height);
    const int bx1 = clampi(static_cast<int>(std::ceil(b.x1)), 0, im.width);
    const int by1 = clampi(static_cast<int>(std::ceil(b.y1)), 0, im.height);
    if (bx1 <= bx0 || by1 <= by0) continue;

    // Horizontal pass over the box expanded vertically by the kernel radius,
    // so the vertical pass has blurred rows to sample.
    const int ey0 = clampi(by0 - radius, 0, im.height);
    const int ey1 = clampi(by1 + radius, 0, im.height);
    const int ew = bx1 - bx0, eh = ey1 - ey0;
    std::vector<double> hbuf(static_cast<std::size_t>(ew) * eh * 3);
    for (int y = ey0; y < ey1; ++y) {
      for (int x = bx0; x < bx1; ++x) {
        double acc[3] = {0, 0, 0};
        for (int k = -radius; k <= radius; ++k) {
          const int sx = clampi(x + k, 0, im.width - 1);
          const double w = kernel[static_cast<std::size_t>(k + radius)];
          for (int c = 0; c < 3; ++c) acc[c] += w * im.at(sx, y, c);
        }
        double* dst = &hbuf[((static_cast<std::size_t>(y - ey0)) * ew + (x - bx0)) * 3];
        for (int c = 0; c < 3; ++c) dst[c] = acc[c];
      }
    }
    for (int y = by0; y < by1; ++y) {
      for (int x = bx0; x < bx1; ++x) {
        double acc[3] = {0, 0, 0};
        for (int k = -radius; k <= radius; ++k) {
          const int sy = clampi(y + k, ey0, ey1 - 1);
          const double w = kernel[static_cast<std::size_t>(k + radius)];
          const double* src = &hbuf[((static_cast<std::size_t>(sy - ey0)) * ew + (x - bx0)) * 3];
          for (int c = 0; c < 3; ++c) acc[c] += w * src[c];
        }
        for (int c = 0; c < 3; ++c)
          out.at(x, y, c) = detail::clamp8(static_cast<int>(std::lround(acc[c])));
      }
    }
  }
  return out;
}

}  // namespace kinelift::img
