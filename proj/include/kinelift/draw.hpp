#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "kinelift/image.hpp"

// Minimal rasterizer for the indexed skeleton overlays sent to the agent:
// lines, rectangle outlines, and a 5x7 bitmap font for "P<i>" labels.

namespace kinelift::img {

struct Color {
  std::uint8_t r = 0, g = 0, b = 0;
};

inline void put_pixel(RasterImage& im, int x, int y, Color c) {
  if (x < 0 || y < 0 || x >= im.width || y >= im.height) return;
  im.at(x, y, 0) = c.r;
  im.at(x, y, 1) = c.g;
  im.at(x, y, 2) = c.b;
}

inline void draw_line(RasterImage& im, int x0, int y0, int x1, int y1, Color c) {
  int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    put_pixel(im, x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

inline void draw_rect(RasterImage& im, int x0, int y0, int x1, int y1, Color c) {
  draw_line(im, x0, y0, x1, y0, c);
  draw_line(im, x1, y0, x1, y1, c);
  draw_line(im, x1, y1, x0, y1, c);
  draw_line(im, x0, y1, x0, y0, c);
}

namespace detail {

// 5x7 glyphs, row-major bits, MSB = leftmost column.
inline std::uint8_t glyph_row(char ch, int row) {
  static constexpr std::array<std::array<std::uint8_t, 7>, 12> glyphs = {{
      {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E},  // 0
      {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},  // 1
      {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F},  // 2
      {0x0E, 0x11, 0x01, 0x06, 0x01, 0x11, 0x0E},  // 3
      {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02},  // 4
      {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},  // 5
      {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E},  // 6
      {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},  // 7
      {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E},  // 8
      {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C},  // 9
      {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10},  // P
      {0x00, 0x00, 0x00, 0x0E, 0x00, 0x00, 0x00},  // -
  }};
  int idx;
  if (ch >= '0' && ch <= '9') idx = ch - '0';
  else if (ch == 'P') idx = 10;
  else if (ch == '-') idx = 11;
  else return 0;
  return glyphs[static_cast<std::size_t>(idx)][static_cast<std::size_t>(row)];
}

}  // namespace detail

inline void draw_text(RasterImage& im, int x, int y, const std::string& text, Color c, int scale = 1) {
  int cx = x;
  for (char ch : text) {
    for (int row = 0; row < 7; ++row) {
      const std::uint8_t bits = detail::glyph_row(ch, row);
      for (int col = 0; col < 5; ++col) {
        if (!(bits & (0x10 >> col))) continue;
        for (int sy = 0; sy < scale; ++sy)
          for (int sx = 0; sx < scale; ++sx)
            put_pixel(im, cx + col * scale + sx, y + row * scale + sy, c);
      }
    }
    cx += 6 * scale;
  }
}

// Deterministic per-index palette; repeats after 8 entries.
inline Color index_color(int index) {
  static constexpr std::array<Color, 8> palette = {{
      {230, 60, 60},
      {60, 180, 75},
      {60, 100, 230},
      {240, 180, 0},
      {145, 30, 180},
      {70, 200, 200},
      {240, 120, 40},
      {220, 80, 180},
  }};
  return palette[static_cast<std::size_t>(index % 8)];
}

}  // namespace kinelift::img
