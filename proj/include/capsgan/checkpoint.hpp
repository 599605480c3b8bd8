#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "capsgan/errors.hpp"
#include "capsgan/gan.hpp"
#include "capsgan/hash.hpp"

namespace capsgan {

// Checkpoint container, little-endian throughout:
//   8 bytes   magic "CAPSGAN1"
//   u32       format version (currently 1)
//   u64+bytes model config as canonical JSON (keys sorted)
//   u64       model seed
//   u64       model step counter
//   u64 x2    generator / discriminator Adam step counters
//   u64       buffer count, then per buffer:
//               u64+bytes name, u64 rank, u64 dims..., u64 count, f64 values
//   u32       CRC-32 over everything before it
// Buffers hold each parameter value plus its two Adam accumulators, so a
// round trip restores training bit-for-bit.
namespace detail {

constexpr char kCheckpointMagic[8] = {'C', 'A', 'P', 'S', 'G', 'A', 'N', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

class ByteWriter {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void tensor(const Tensor& t) {
    u64(t.rank());
    for (std::size_t i = 0; i < t.rank(); ++i) u64(t.dim(i));
    u64(t.size());
    raw(t.data(), t.size() * sizeof(double));
  }
  void raw(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  std::vector<char> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& b, const std::string& path) : bytes_(b), path_(path) {}

  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  std::string str() {
    std::uint64_t n = u64();
    check(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    std::uint64_t rank = u64();
    if (rank > 8) throw CheckpointFormatError(path_ + ": implausible tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = u64();
    std::uint64_t count = u64();
    if (count != numel(shape))
      throw CheckpointFormatError(path_ + ": tensor count does not match its shape");
    check(count * sizeof(double));
    Tensor t(shape);
    std::memcpy(t.data(), bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
    return t;
  }
  void raw(void* p, std::size_t n) {
    check(n);
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  void check(std::uint64_t n) const {
    if (pos_ + n > bytes_.size())
      throw CheckpointTruncatedError(path_ + ": truncated at byte " + std::to_string(pos_) +
                                     ", needed " + std::to_string(n) + " more");
  }
  const std::vector<char>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline void write_param_buffers(ByteWriter& w, const std::string& prefix,
                                const std::vector<Param>& params, const AdamState& opt) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    w.str(prefix + params[i].name);
    w.tensor(params[i].value);
    w.str(prefix + params[i].name + "/m");
    w.tensor(opt.m[i]);
    w.str(prefix + params[i].name + "/v");
    w.tensor(opt.v[i]);
  }
}

inline Tensor take_buffer(ByteReader& r, const std::string& path, const std::string& expect,
                          const Shape& shape) {
  std::string name = r.str();
  if (name != expect)
    throw CheckpointFormatError(path + ": expected buffer \"" + expect + "\", found \"" + name +
                                "\"");
  Tensor t = r.tensor();
  if (t.shape() != shape)
    throw CheckpointFormatError(path + ": buffer \"" + expect + "\" has shape " +
                                shape_str(t.shape()) + ", model needs " + shape_str(shape));
  return t;
}

}  // namespace detail

inline void save_checkpoint(const GanModel& model, const std::string& path) {
  detail::ByteWriter w;
  w.raw(detail::kCheckpointMagic, 8);
  w.u32(detail::kCheckpointVersion);
  w.str(json(model.config()).dump());
  w.u64(model.seed());
  w.u64(model.step());
  w.u64(model.generator_opt().step);
  w.u64(model.discriminator_opt().step);
  std::uint64_t buffers =
      3 * (model.generator_params().size() + model.discriminator_params().size());
  w.u64(buffers);
  detail::write_param_buffers(w, "g/", model.generator_params(), model.generator_opt());
  detail::write_param_buffers(w, "d/", model.discriminator_params(), model.discriminator_opt());
  w.u32(crc32(w.bytes.data(), w.bytes.size()));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(w.bytes.data(), static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw IoError("short write to checkpoint " + path);
}

inline GanModel load_checkpoint(const std::string& path,
                                std::optional<DiscVariant> expected_variant = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 16) throw CheckpointTruncatedError(path + ": too short for a header");
  if (std::memcmp(bytes.data(), detail::kCheckpointMagic, 8) != 0)
    throw CheckpointFormatError(path + ": bad magic, not a checkpoint");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  std::uint32_t actual_crc = crc32(bytes.data(), bytes.size() - 4);

  detail::ByteReader r(bytes, path);
  char magic[8];
  r.raw(magic, 8);
  std::uint32_t version = r.u32();
  if (version != detail::kCheckpointVersion)
    throw CheckpointVersionError(path + ": format version " + std::to_string(version) +
                                 ", this build reads version " +
                                 std::to_string(detail::kCheckpointVersion));
  if (stored_crc != actual_crc)
    throw CheckpointChecksumError(path + ": checksum mismatch, file is corrupt");

  GanConfig cfg;
  try {
    cfg = json::parse(r.str()).get<GanConfig>();
  } catch (const json::exception& e) {
    throw CheckpointFormatError(path + ": embedded config is unreadable: " + e.what());
  }
  if (expected_variant && cfg.discriminator.variant != *expected_variant)
    throw CheckpointVariantError(path + ": holds a " + to_string(cfg.discriminator.variant) +
                                 " discriminator, expected " + to_string(*expected_variant));
  std::uint64_t seed = r.u64();
  std::uint64_t step = r.u64();
  std::uint64_t g_opt_step = r.u64();
  std::uint64_t d_opt_step = r.u64();

  GanModel model = GanModel::init(cfg, seed);
  model.set_step(step);
  model.generator_opt().step = g_opt_step;
  model.discriminator_opt().step = d_opt_step;

  std::uint64_t buffers = r.u64();
  std::uint64_t expected =
      3 * (model.generator_params().size() + model.discriminator_params().size());
  if (buffers != expected)
    throw CheckpointFormatError(path + ": " + std::to_string(buffers) + " buffers, model needs " +
                                std::to_string(expected));
  auto read_side = [&](const std::string& prefix, std::vector<Param>& params, AdamState& opt) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i].value =
          detail::take_buffer(r, path, prefix + params[i].name, params[i].value.shape());
      opt.m[i] = detail::take_buffer(r, path, prefix + params[i].name + "/m", opt.m[i].shape());
      opt.v[i] = detail::take_buffer(r, path, prefix + params[i].name + "/v", opt.v[i].shape());
    }
  };
  read_side("g/", model.generator_params(), model.generator_opt());
  read_side("d/", model.discriminator_params(), model.discriminator_opt());
  if (r.pos() != bytes.size() - 4)
    throw CheckpointFormatError(path + ": " + std::to_string(bytes.size() - 4 - r.pos()) +
                                " unexpected trailing bytes");
  return model;
}

}  // namespace capsgan
