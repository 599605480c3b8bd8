#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "capsgan/errors.hpp"
#include "capsgan/hash.hpp"
#include "capsgan/tensor.hpp"

namespace capsgan {
namespace detail {

inline void push_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v >> 24));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v));
}

inline void push_chunk(std::vector<unsigned char>& out, const char type[4],
                       const std::vector<unsigned char>& data) {
  push_u32_be(out, static_cast<std::uint32_t>(data.size()));
  std::size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  push_u32_be(out, crc32(out.data() + crc_start, out.size() - crc_start));
}

// Deflate with stored (uncompressed) blocks only: deterministic, no external
// compressor, fine for the small grids this writes.
inline std::vector<unsigned char> zlib_stored(const std::vector<unsigned char>& raw) {
  std::vector<unsigned char> z;
  z.push_back(0x78);
  z.push_back(0x01);
  std::size_t pos = 0;
  do {
    std::size_t len = std::min<std::size_t>(raw.size() - pos, 65535);
    bool final = pos + len == raw.size();
    z.push_back(final ? 1 : 0);
    z.push_back(static_cast<unsigned char>(len & 0xFF));
    z.push_back(static_cast<unsigned char>(len >> 8));
    z.push_back(static_cast<unsigned char>(~len & 0xFF));
    z.push_back(static_cast<unsigned char>((~len >> 8) & 0xFF));
    z.insert(z.end(), raw.begin() + static_cast<std::ptrdiff_t>(pos),
             raw.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  } while (pos < raw.size());
  std::uint32_t a = adler32(raw.data(), raw.size());
  push_u32_be(z, a);
  return z;
}

}  // namespace detail

// Minimal PNG writer: 8-bit grayscale (channels = 1) or RGB (channels = 3),
// filter 0 on every scanline, stored deflate blocks. Byte-for-byte
// deterministic for identical input.
inline void write_png(const std::string& path, std::size_t width, std::size_t height,
                      std::size_t channels, const std::vector<unsigned char>& pixels) {
  if (channels != 1 && channels != 3)
    throw std::invalid_argument("write_png: channels must be 1 or 3, got " +
                                std::to_string(channels));
  if (width == 0 || height == 0)
    throw std::invalid_argument("write_png: empty image " + std::to_string(width) + "x" +
                                std::to_string(height));
  if (pixels.size() != width * height * channels)
    throw std::invalid_argument("write_png: expected " +
                                std::to_string(width * height * channels) + " bytes, got " +
                                std::to_string(pixels.size()));

  std::vector<unsigned char> png = {137, 'P', 'N', 'G', 13, 10, 26, 10};
  std::vector<unsigned char> ihdr;
  detail::push_u32_be(ihdr, static_cast<std::uint32_t>(width));
  detail::push_u32_be(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);                                  // bit depth
  ihdr.push_back(channels == 1 ? 0 : 2);              // gray / truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  detail::push_chunk(png, "IHDR", ihdr);

  std::vector<unsigned char> raw;
  raw.reserve(height * (1 + width * channels));
  for (std::size_t y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    const unsigned char* row = pixels.data() + y * width * channels;
    raw.insert(raw.end(), row, row + width * channels);
  }
  detail::push_chunk(png, "IDAT", detail::zlib_stored(raw));
  detail::push_chunk(png, "IEND", {});

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
  if (!f) throw IoError("short write to " + path);
}

inline unsigned char signed11_to_byte(double v) {
  double b = std::round((v + 1.0) * 127.5);
  if (b < 0.0) b = 0.0;
  if (b > 255.0) b = 255.0;
  return static_cast<unsigned char>(b);
}

// Tiles a [N,C,H,W] batch in (-1,1) into a near-square grid of bytes,
// row-major cells, unused cells black. Returns interleaved pixels suitable
// for write_png, plus the grid geometry through the out-parameters.
inline std::vector<unsigned char> image_grid(const Tensor& images, std::size_t& grid_width,
                                             std::size_t& grid_height, std::size_t& channels) {
  if (images.rank() != 4 || images.dim(0) == 0)
    throw std::invalid_argument("image_grid: expected non-empty [N,C,H,W], got " +
                                shape_str(images.shape()));
  std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (c != 1 && c != 3)
    throw std::invalid_argument("image_grid: channels must be 1 or 3, got " + std::to_string(c));
  std::size_t rows = static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n))));
  if (rows == 0) rows = 1;
  std::size_t cols = (n + rows - 1) / rows;
  grid_width = cols * w;
  grid_height = rows * h;
  channels = c;
  std::vector<unsigned char> pixels(grid_width * grid_height * c, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t cell_r = i / cols, cell_c = i % cols;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          double v = images[((i * c + ch) * h + y) * w + x];
          std::size_t py = cell_r * h + y, px = cell_c * w + x;
          pixels[(py * grid_width + px) * c + ch] = signed11_to_byte(v);
        }
  }
  return pixels;
}

inline void write_image_grid_png(const std::string& path, const Tensor& images) {
  std::size_t gw = 0, gh = 0, ch = 0;
  auto pixels = image_grid(images, gw, gh, ch);
  write_png(path, gw, gh, ch, pixels);
}

// Raw tensor dump: "CGTD" magic, u32 version, u64 rank, u64 dims, f64
// little-endian payload. Lossless round-trip for downstream tooling.
inline void write_tensor_dump(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write("CGTD", 4);
  std::uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), 4);
  std::uint64_t rank = t.rank();
  f.write(reinterpret_cast<const char*>(&rank), 8);
  for (std::size_t i = 0; i < t.rank(); ++i) {
    std::uint64_t d = t.dim(i);
    f.write(reinterpret_cast<const char*>(&d), 8);
  }
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!f) throw IoError("short write to " + path);
}

inline Tensor read_tensor_dump(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4] = {};
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "CGTD")
    throw DataFormatError(path + ": not a tensor dump");
  std::uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  if (!f || version != 1)
    throw DataFormatError(path + ": unsupported tensor dump version " + std::to_string(version));
  std::uint64_t rank = 0;
  f.read(reinterpret_cast<char*>(&rank), 8);
  if (!f || rank > 8) throw DataFormatError(path + ": bad tensor rank");
  Shape shape(rank);
  for (std::size_t i = 0; i < shape.size(); ++i) {
    std::uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    if (!f) throw DataFormatError(path + ": truncated dims");
    shape[i] = static_cast<std::size_t>(v);
  }
  Tensor t(shape);
  f.read(reinterpret_cast<char*>(t.data()),
         static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!f) throw DataFormatError(path + ": truncated payload");
  return t;
}

}  // namespace capsgan
