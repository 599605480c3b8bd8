#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "capsgan/errors.hpp"
#include "capsgan/rng.hpp"
#include "capsgan/tensor.hpp"

namespace capsgan {

enum class Provenance { real, generated };
enum class ValueRange { raw01, signed11 };

struct LabeledDataset {
  Tensor images;  // [N,C,H,W]
  std::vector<int> labels;
  int class_count = 0;
  Provenance provenance = Provenance::real;
  ValueRange range = ValueRange::raw01;

  std::size_t size() const { return labels.size(); }
};

// [0,1] -> [-1,1], endpoints map to endpoints.
inline Tensor to_signed11(const Tensor& t) {
  Tensor out = t;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] * 2.0 - 1.0;
  return out;
}

inline Tensor to_raw01(const Tensor& t) {
  Tensor out = t;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::clamp((out[i] + 1.0) / 2.0, 0.0, 1.0);
  return out;
}

namespace detail {

inline std::uint32_t read_u32_be(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw DataFormatError(path + ": truncated while reading header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

inline void write_u32_be(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::ifstream open_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return in;
}

}  // namespace detail

// IDX image/label pair (big-endian headers, magics 0x803 and 0x801).
// Bytes scale linearly to [0,1]: 0 -> 0.0, 255 -> 1.0.
inline LabeledDataset load_mnist_idx(const std::string& images_path,
                                     const std::string& labels_path) {
  auto imgs = detail::open_binary(images_path);
  std::uint32_t magic = detail::read_u32_be(imgs, images_path);
  if (magic != 0x00000803)
    throw DataFormatError(images_path + ": bad image magic, expected 0x00000803");
  std::uint32_t count = detail::read_u32_be(imgs, images_path);
  std::uint32_t rows = detail::read_u32_be(imgs, images_path);
  std::uint32_t cols = detail::read_u32_be(imgs, images_path);
  std::vector<unsigned char> pixels(std::size_t(count) * rows * cols);
  if (!imgs.read(reinterpret_cast<char*>(pixels.data()),
                 static_cast<std::streamsize>(pixels.size())))
    throw DataFormatError(images_path + ": truncated, expected " + std::to_string(pixels.size()) +
                          " pixel bytes");

  auto labs = detail::open_binary(labels_path);
  std::uint32_t lmagic = detail::read_u32_be(labs, labels_path);
  if (lmagic != 0x00000801)
    throw DataFormatError(labels_path + ": bad label magic, expected 0x00000801");
  std::uint32_t lcount = detail::read_u32_be(labs, labels_path);
  if (lcount != count)
    throw DataFormatError(labels_path + ": " + std::to_string(lcount) + " labels for " +
                          std::to_string(count) + " images in " + images_path);
  std::vector<unsigned char> labels(lcount);
  if (!labs.read(reinterpret_cast<char*>(labels.data()),
                 static_cast<std::streamsize>(labels.size())))
    throw DataFormatError(labels_path + ": truncated, expected " + std::to_string(lcount) +
                          " label bytes");

  LabeledDataset ds;
  ds.images = Tensor({count, 1, rows, cols});
  for (std::size_t i = 0; i < pixels.size(); ++i) ds.images[i] = pixels[i] / 255.0;
  ds.labels.assign(labels.begin(), labels.end());
  ds.class_count = 10;
  ds.provenance = Provenance::real;
  ds.range = ValueRange::raw01;
  return ds;
}

inline void save_mnist_idx(const LabeledDataset& ds, const std::string& images_path,
                           const std::string& labels_path) {
  if (ds.images.rank() != 4 || ds.images.dim(1) != 1)
    throw ShapeError("save_mnist_idx: expected [N,1,H,W] images, got " +
                     shape_str(ds.images.shape()));
  std::ofstream imgs(images_path, std::ios::binary);
  if (!imgs) throw IoError("cannot write " + images_path);
  detail::write_u32_be(imgs, 0x00000803);
  detail::write_u32_be(imgs, static_cast<std::uint32_t>(ds.images.dim(0)));
  detail::write_u32_be(imgs, static_cast<std::uint32_t>(ds.images.dim(2)));
  detail::write_u32_be(imgs, static_cast<std::uint32_t>(ds.images.dim(3)));
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    double v = std::clamp(ds.images[i], 0.0, 1.0);
    unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
    imgs.write(reinterpret_cast<const char*>(&b), 1);
  }
  std::ofstream labs(labels_path, std::ios::binary);
  if (!labs) throw IoError("cannot write " + labels_path);
  detail::write_u32_be(labs, 0x00000801);
  detail::write_u32_be(labs, static_cast<std::uint32_t>(ds.labels.size()));
  for (int l : ds.labels) {
    unsigned char b = static_cast<unsigned char>(l);
    labs.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!imgs || !labs) throw IoError("short write to " + images_path + " or " + labels_path);
}

// CIFAR-10 binary batches: 3073-byte records, 1 label byte then 3x1024
// channel planes.
inline LabeledDataset load_cifar10_binary(const std::vector<std::string>& paths) {
  if (paths.empty()) throw DataFormatError("load_cifar10_binary: no batch files given");
  constexpr std::size_t kRecord = 3073;
  std::vector<unsigned char> all;
  for (const std::string& path : paths) {
    auto in = detail::open_binary(path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (buf.empty() || buf.size() % kRecord != 0)
      throw DataFormatError(path + ": size " + std::to_string(buf.size()) +
                            " is not a multiple of 3073-byte records");
    all.insert(all.end(), buf.begin(), buf.end());
  }
  std::size_t n = all.size() / kRecord;
  LabeledDataset ds;
  ds.images = Tensor({n, 3, 32, 32});
  ds.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = all.data() + r * kRecord;
    if (rec[0] > 9)
      throw DataFormatError("cifar10 record " + std::to_string(r) + ": label " +
                            std::to_string(rec[0]) + " out of range");
    ds.labels[r] = rec[0];
    for (std::size_t i = 0; i < 3072; ++i) ds.images[r * 3072 + i] = rec[1 + i] / 255.0;
  }
  ds.class_count = 10;
  ds.provenance = Provenance::real;
  ds.range = ValueRange::raw01;
  return ds;
}

inline void save_cifar10_binary(const LabeledDataset& ds, const std::string& path) {
  if (ds.images.rank() != 4 || ds.images.dim(1) != 3 || ds.images.dim(2) != 32 ||
      ds.images.dim(3) != 32)
    throw ShapeError("save_cifar10_binary: expected [N,3,32,32] images, got " +
                     shape_str(ds.images.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  std::size_t n = ds.images.dim(0);
  for (std::size_t r = 0; r < n; ++r) {
    unsigned char label = static_cast<unsigned char>(ds.labels[r]);
    out.write(reinterpret_cast<const char*>(&label), 1);
    for (std::size_t i = 0; i < 3072; ++i) {
      double v = std::clamp(ds.images[r * 3072 + i], 0.0, 1.0);
      unsigned char b = static_cast<unsigned char>(std::lround(v * 255.0));
      out.write(reinterpret_cast<const char*>(&b), 1);
    }
  }
  if (!out) throw IoError("short write to " + path);
}

// Tiny multi-modal image distribution: M template patterns plus Gaussian
// pixel noise, clamped back to [0,1]. Templates must stay well separated
// relative to the noise so nearest-template assignment recovers the mode.
struct SyntheticSpec {
  int height = 8;
  int width = 8;
  int channels = 1;
  int modes = 2;
  double noise_std = 0.05;
  int per_mode = 500;

  void validate() const {
    if (height < 1 || width < 1 || channels < 1)
      throw ConfigError("synthetic: dimensions must be positive");
    if (modes < 1) throw ConfigError("synthetic: modes must be >= 1");
    if (!(noise_std >= 0.0)) throw ConfigError("synthetic: noise_std must be >= 0");
    if (per_mode < 1) throw ConfigError("synthetic: per_mode must be >= 1");
  }
};

// Mode m brightens the m-th horizontal band of the image.
inline std::vector<Tensor> synthetic_templates(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<Tensor> out;
  std::size_t C = static_cast<std::size_t>(spec.channels);
  std::size_t H = static_cast<std::size_t>(spec.height);
  std::size_t W = static_cast<std::size_t>(spec.width);
  for (int m = 0; m < spec.modes; ++m) {
    Tensor t({C, H, W});
    std::size_t band_lo = H * static_cast<std::size_t>(m) / static_cast<std::size_t>(spec.modes);
    std::size_t band_hi =
        H * static_cast<std::size_t>(m + 1) / static_cast<std::size_t>(spec.modes);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
          t[(c * H + h) * W + w] = (h >= band_lo && h < band_hi) ? 0.85 : 0.15;
    out.push_back(std::move(t));
  }
  // Separation check: nearest-template assignment needs modes further apart
  // than the noise floor.
  for (std::size_t a = 0; a < out.size(); ++a)
    for (std::size_t b = a + 1; b < out.size(); ++b) {
      double d2 = 0.0;
      for (std::size_t i = 0; i < out[a].size(); ++i) {
        double d = out[a][i] - out[b][i];
        d2 += d * d;
      }
      if (std::sqrt(d2) <= 4.0 * spec.noise_std)
        throw ConfigError("synthetic: templates " + std::to_string(a) + " and " +
                          std::to_string(b) + " closer than 4x noise_std");
    }
  return out;
}

inline LabeledDataset make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  auto templates = synthetic_templates(spec);
  std::size_t per = static_cast<std::size_t>(spec.per_mode);
  std::size_t n = per * templates.size();
  LabeledDataset ds;
  ds.images = Tensor({n, static_cast<std::size_t>(spec.channels),
                      static_cast<std::size_t>(spec.height),
                      static_cast<std::size_t>(spec.width)});
  ds.labels.resize(n);
  Rng rng(seed);
  std::size_t px = templates[0].size();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t m = i % templates.size();
    ds.labels[i] = static_cast<int>(m);
    for (std::size_t k = 0; k < px; ++k)
      ds.images[i * px + k] =
          std::clamp(templates[m][k] + spec.noise_std * rng.next_normal(), 0.0, 1.0);
  }
  ds.class_count = spec.modes;
  ds.provenance = Provenance::real;
  ds.range = ValueRange::raw01;
  return ds;
}

// Index of the nearest template (L2) for image `index` of a [N,C,H,W] batch
// in the same value range as the templates.
inline int nearest_template(const std::vector<Tensor>& templates, const Tensor& images,
                            std::size_t index) {
  std::size_t px = templates.at(0).size();
  const double* img = images.data() + index * px;
  int best = 0;
  double best_d2 = 0.0;
  for (std::size_t m = 0; m < templates.size(); ++m) {
    double d2 = 0.0;
    for (std::size_t k = 0; k < px; ++k) {
      double d = img[k] - templates[m][k];
      d2 += d * d;
    }
    if (m == 0 || d2 < best_d2) {
      best_d2 = d2;
      best = static_cast<int>(m);
    }
  }
  return best;
}

// Epoch permutation batches. Partial trailing batch is dropped, so every
// batch has exactly batch_size indices. Same (seed, epoch) -> same batches;
// different epochs reshuffle.
inline std::vector<std::vector<std::size_t>> batches(std::size_t dataset_size,
                                                     std::size_t batch_size, std::uint64_t seed,
                                                     std::uint64_t epoch) {
  if (batch_size < 1 || batch_size > dataset_size)
    throw std::invalid_argument("batches: batch_size " + std::to_string(batch_size) +
                                " out of range for dataset of " + std::to_string(dataset_size));
  std::vector<std::size_t> perm(dataset_size);
  for (std::size_t i = 0; i < dataset_size; ++i) perm[i] = i;
  Rng rng(mix_seed(seed, epoch));
  for (std::size_t i = dataset_size - 1; i > 0; --i) {
    std::size_t j = static_cast<std::size_t>(rng.next_u64() % (i + 1));
    std::swap(perm[i], perm[j]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start + batch_size <= dataset_size; start += batch_size)
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                     perm.begin() + static_cast<std::ptrdiff_t>(start + batch_size));
  return out;
}

inline Tensor gather_images(const Tensor& images, const std::vector<std::size_t>& idx) {
  std::size_t px = images.size() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = idx.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t k = 0; k < px; ++k) out[i * px + k] = images[idx[i] * px + k];
  return out;
}

}  // namespace capsgan
