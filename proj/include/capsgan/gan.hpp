#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capsgan/autodiff.hpp"
#include "capsgan/capsnet.hpp"
#include "capsgan/datasets.hpp"
#include "capsgan/errors.hpp"
#include "capsgan/optim.hpp"
#include "capsgan/rng.hpp"

namespace capsgan {

using json = nlohmann::json;

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
};

// Dense projection followed by stride-2 transposed-conv stages, each doubling
// H and W; leaky_relu between stages, tanh on the output.
struct GeneratorConfig {
  int latent_dim = 100;
  int out_channels = 1;
  int out_height = 28;
  int out_width = 28;
  int proj_channels = 128;
  int proj_height = 7;
  int proj_width = 7;
  std::vector<int> stage_channels = {64, 1};
  int kernel = 4;
  int pad = 1;
  double leaky_slope = 0.2;

  void validate() const {
    if (latent_dim < 1) throw ConfigError("generator: latent_dim must be >= 1");
    if (out_channels < 1 || out_height < 1 || out_width < 1)
      throw ConfigError("generator: output dimensions must be positive");
    if (proj_channels < 1 || proj_height < 1 || proj_width < 1)
      throw ConfigError("generator: projection dimensions must be positive");
    if (stage_channels.empty()) throw ConfigError("generator: needs at least one stage");
    for (int c : stage_channels)
      if (c < 1) throw ConfigError("generator: stage channels must be positive");
    if (kernel - 2 * pad != 2)
      throw ConfigError("generator: kernel - 2*pad must equal 2 so each stage doubles H and W");
    int h = proj_height, w = proj_width;
    for (std::size_t i = 0; i < stage_channels.size(); ++i) {
      h *= 2;
      w *= 2;
    }
    if (h != out_height || w != out_width)
      throw ConfigError("generator: projection " + std::to_string(proj_height) + "x" +
                        std::to_string(proj_width) + " with " +
                        std::to_string(stage_channels.size()) + " stride-2 stages reaches " +
                        std::to_string(h) + "x" + std::to_string(w) + ", not " +
                        std::to_string(out_height) + "x" + std::to_string(out_width));
    if (stage_channels.back() != out_channels)
      throw ConfigError("generator: last stage must emit out_channels");
  }
};

struct ConvDiscConfig {
  std::vector<int> filters = {32, 64};
  int kernel = 5;
  int stride = 2;
  int pad = 2;
  double leaky_slope = 0.2;

  void validate() const {
    if (filters.empty()) throw ConfigError("conv discriminator: needs at least one layer");
    for (int f : filters)
      if (f < 1) throw ConfigError("conv discriminator: filter counts must be positive");
    if (kernel < 1 || stride < 1 || pad < 0)
      throw ConfigError("conv discriminator: bad kernel/stride/pad");
  }
};

struct CapsDiscConfig {
  int conv_filters = 32;
  int conv_kernel = 5;
  int conv_stride = 1;
  int conv_pad = 0;
  double leaky_slope = 0.2;
  int pc_channels = 8;
  int pc_capsule_dim = 8;
  int pc_kernel = 5;
  int pc_stride = 2;
  int pc_pad = 0;
  int final_capsule_dim = 16;
  int routing_iters = 3;
  bool cosine_agreement = false;

  void validate() const {
    if (conv_filters < 1 || conv_kernel < 1 || conv_stride < 1 || conv_pad < 0)
      throw ConfigError("capsule discriminator: bad conv layer settings");
    if (pc_channels < 1 || pc_capsule_dim < 1 || pc_kernel < 1 || pc_stride < 1 || pc_pad < 0)
      throw ConfigError("capsule discriminator: bad primary capsule settings");
    if (final_capsule_dim < 1) throw ConfigError("capsule discriminator: bad final capsule dim");
    if (routing_iters < 1) throw ConfigError("capsule discriminator: routing_iters must be >= 1");
  }
};

enum class DiscVariant { convolutional, capsule };

struct DiscriminatorConfig {
  DiscVariant variant = DiscVariant::capsule;
  CapsDiscConfig capsule{};
  ConvDiscConfig convolutional{};
  std::size_t param_budget = 2000000;
};

struct GanConfig {
  GeneratorConfig generator{};
  DiscriminatorConfig discriminator{};
  AdamConfig generator_opt{};
  AdamConfig discriminator_opt{};
  MarginLossConfig margin{};
  int batch_size = 64;

  void validate() const {
    generator.validate();
    if (discriminator.variant == DiscVariant::capsule)
      discriminator.capsule.validate();
    else
      discriminator.convolutional.validate();
    generator_opt.validate();
    discriminator_opt.validate();
    margin.validate();
    if (batch_size < 1) throw ConfigError("gan: batch_size must be >= 1");
  }

  ImageShape image_shape() const {
    return {static_cast<std::size_t>(generator.out_channels),
            static_cast<std::size_t>(generator.out_height),
            static_cast<std::size_t>(generator.out_width)};
  }
};

inline void to_json(json& j, const AdamConfig& c) {
  j = json{{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"epsilon", c.epsilon}};
}
inline void from_json(const json& j, AdamConfig& c) {
  j.at("lr").get_to(c.lr);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("epsilon").get_to(c.epsilon);
}

inline void to_json(json& j, const MarginLossConfig& c) {
  j = json{{"m_plus", c.m_plus}, {"m_minus", c.m_minus}, {"lambda", c.lambda}};
}
inline void from_json(const json& j, MarginLossConfig& c) {
  j.at("m_plus").get_to(c.m_plus);
  j.at("m_minus").get_to(c.m_minus);
  j.at("lambda").get_to(c.lambda);
}

inline void to_json(json& j, const GeneratorConfig& c) {
  j = json{{"latent_dim", c.latent_dim},     {"out_channels", c.out_channels},
           {"out_height", c.out_height},     {"out_width", c.out_width},
           {"proj_channels", c.proj_channels}, {"proj_height", c.proj_height},
           {"proj_width", c.proj_width},     {"stage_channels", c.stage_channels},
           {"kernel", c.kernel},             {"pad", c.pad},
           {"leaky_slope", c.leaky_slope}};
}
inline void from_json(const json& j, GeneratorConfig& c) {
  j.at("latent_dim").get_to(c.latent_dim);
  j.at("out_channels").get_to(c.out_channels);
  j.at("out_height").get_to(c.out_height);
  j.at("out_width").get_to(c.out_width);
  j.at("proj_channels").get_to(c.proj_channels);
  j.at("proj_height").get_to(c.proj_height);
  j.at("proj_width").get_to(c.proj_width);
  j.at("stage_channels").get_to(c.stage_channels);
  j.at("kernel").get_to(c.kernel);
  j.at("pad").get_to(c.pad);
  j.at("leaky_slope").get_to(c.leaky_slope);
}

inline void to_json(json& j, const ConvDiscConfig& c) {
  j = json{{"filters", c.filters},
           {"kernel", c.kernel},
           {"stride", c.stride},
           {"pad", c.pad},
           {"leaky_slope", c.leaky_slope}};
}
inline void from_json(const json& j, ConvDiscConfig& c) {
  j.at("filters").get_to(c.filters);
  j.at("kernel").get_to(c.kernel);
  j.at("stride").get_to(c.stride);
  j.at("pad").get_to(c.pad);
  j.at("leaky_slope").get_to(c.leaky_slope);
}

inline void to_json(json& j, const CapsDiscConfig& c) {
  j = json{{"conv_filters", c.conv_filters},
           {"conv_kernel", c.conv_kernel},
           {"conv_stride", c.conv_stride},
           {"conv_pad", c.conv_pad},
           {"leaky_slope", c.leaky_slope},
           {"pc_channels", c.pc_channels},
           {"pc_capsule_dim", c.pc_capsule_dim},
           {"pc_kernel", c.pc_kernel},
           {"pc_stride", c.pc_stride},
           {"pc_pad", c.pc_pad},
           {"final_capsule_dim", c.final_capsule_dim},
           {"routing_iters", c.routing_iters},
           {"cosine_agreement", c.cosine_agreement}};
}
inline void from_json(const json& j, CapsDiscConfig& c) {
  j.at("conv_filters").get_to(c.conv_filters);
  j.at("conv_kernel").get_to(c.conv_kernel);
  j.at("conv_stride").get_to(c.conv_stride);
  j.at("conv_pad").get_to(c.conv_pad);
  j.at("leaky_slope").get_to(c.leaky_slope);
  j.at("pc_channels").get_to(c.pc_channels);
  j.at("pc_capsule_dim").get_to(c.pc_capsule_dim);
  j.at("pc_kernel").get_to(c.pc_kernel);
  j.at("pc_stride").get_to(c.pc_stride);
  j.at("pc_pad").get_to(c.pc_pad);
  j.at("final_capsule_dim").get_to(c.final_capsule_dim);
  j.at("routing_iters").get_to(c.routing_iters);
  j.at("cosine_agreement").get_to(c.cosine_agreement);
}

inline std::string to_string(DiscVariant v) {
  return v == DiscVariant::capsule ? "capsule" : "convolutional";
}
inline DiscVariant disc_variant_from_string(const std::string& s) {
  if (s == "capsule") return DiscVariant::capsule;
  if (s == "convolutional") return DiscVariant::convolutional;
  throw ConfigError("discriminator variant must be \"capsule\" or \"convolutional\", got \"" + s +
                    "\"");
}

inline void to_json(json& j, const DiscriminatorConfig& c) {
  j = json{{"variant", to_string(c.variant)},
           {"capsule", c.capsule},
           {"convolutional", c.convolutional},
           {"param_budget", c.param_budget}};
}
inline void from_json(const json& j, DiscriminatorConfig& c) {
  c.variant = disc_variant_from_string(j.at("variant").get<std::string>());
  j.at("capsule").get_to(c.capsule);
  j.at("convolutional").get_to(c.convolutional);
  j.at("param_budget").get_to(c.param_budget);
}

inline void to_json(json& j, const GanConfig& c) {
  j = json{{"generator", c.generator},
           {"discriminator", c.discriminator},
           {"generator_opt", c.generator_opt},
           {"discriminator_opt", c.discriminator_opt},
           {"margin", c.margin},
           {"batch_size", c.batch_size}};
}
inline void from_json(const json& j, GanConfig& c) {
  j.at("generator").get_to(c.generator);
  j.at("discriminator").get_to(c.discriminator);
  j.at("generator_opt").get_to(c.generator_opt);
  j.at("discriminator_opt").get_to(c.discriminator_opt);
  j.at("margin").get_to(c.margin);
  j.at("batch_size").get_to(c.batch_size);
}

namespace detail {

struct ParamSpec {
  std::string name;
  Shape shape;
  double init_std = 0.0;  // 0 -> zero init
};

inline std::size_t conv_out_dim(std::size_t in, int k, int s, int p, const std::string& what) {
  long v = static_cast<long>(in) + 2L * p - k;
  if (v < 0)
    throw ConfigError(what + ": kernel " + std::to_string(k) + " larger than padded extent " +
                      std::to_string(in + 2 * static_cast<std::size_t>(p)));
  return static_cast<std::size_t>(v / s) + 1;
}

inline std::vector<ParamSpec> generator_param_specs(const GeneratorConfig& c) {
  c.validate();
  std::vector<ParamSpec> out;
  std::size_t proj = static_cast<std::size_t>(c.proj_channels) *
                     static_cast<std::size_t>(c.proj_height) *
                     static_cast<std::size_t>(c.proj_width);
  out.push_back({"proj.w", {static_cast<std::size_t>(c.latent_dim), proj},
                 std::sqrt(2.0 / c.latent_dim)});
  out.push_back({"proj.b", {proj}, 0.0});
  int cin = c.proj_channels;
  for (std::size_t i = 0; i < c.stage_channels.size(); ++i) {
    int cout = c.stage_channels[i];
    std::size_t k = static_cast<std::size_t>(c.kernel);
    out.push_back({"deconv" + std::to_string(i) + ".k",
                   {static_cast<std::size_t>(cin), static_cast<std::size_t>(cout), k, k},
                   std::sqrt(2.0 / (static_cast<double>(cin) * c.kernel * c.kernel))});
    out.push_back({"deconv" + std::to_string(i) + ".b", {static_cast<std::size_t>(cout)}, 0.0});
    cin = cout;
  }
  return out;
}

// The routed layer weight scale keeps the pre-squash sum near unit length for
// typical squashed inputs, so a freshly initialized discriminator scores
// around 0.5 instead of collapsing to 0.
inline std::vector<ParamSpec> capsule_disc_param_specs(const CapsDiscConfig& c, ImageShape in) {
  c.validate();
  std::vector<ParamSpec> out;
  std::size_t h1 = conv_out_dim(in.height, c.conv_kernel, c.conv_stride, c.conv_pad, "disc conv");
  std::size_t w1 = conv_out_dim(in.width, c.conv_kernel, c.conv_stride, c.conv_pad, "disc conv");
  std::size_t kf = static_cast<std::size_t>(c.conv_filters);
  std::size_t kk = static_cast<std::size_t>(c.conv_kernel);
  out.push_back({"conv.k", {kf, in.channels, kk, kk},
                 std::sqrt(2.0 / (static_cast<double>(in.channels) * c.conv_kernel * c.conv_kernel))});
  out.push_back({"conv.b", {kf}, 0.0});
  std::size_t pc_filters = static_cast<std::size_t>(c.pc_channels) *
                           static_cast<std::size_t>(c.pc_capsule_dim);
  std::size_t pk = static_cast<std::size_t>(c.pc_kernel);
  out.push_back({"pc.k", {pc_filters, kf, pk, pk},
                 std::sqrt(2.0 / (static_cast<double>(kf) * c.pc_kernel * c.pc_kernel))});
  out.push_back({"pc.b", {pc_filters}, 0.0});
  std::size_t h2 = conv_out_dim(h1, c.pc_kernel, c.pc_stride, c.pc_pad, "primary capsules");
  std::size_t w2 = conv_out_dim(w1, c.pc_kernel, c.pc_stride, c.pc_pad, "primary capsules");
  std::size_t caps_in = static_cast<std::size_t>(c.pc_channels) * h2 * w2;
  std::size_t dout = static_cast<std::size_t>(c.final_capsule_dim);
  out.push_back({"caps.w",
                 {caps_in, 1, dout, static_cast<std::size_t>(c.pc_capsule_dim)},
                 1.5 / std::sqrt(static_cast<double>(caps_in) * static_cast<double>(dout))});
  return out;
}

inline std::vector<ParamSpec> conv_disc_param_specs(const ConvDiscConfig& c, ImageShape in) {
  c.validate();
  std::vector<ParamSpec> out;
  std::size_t cin = in.channels, h = in.height, w = in.width;
  std::size_t kk = static_cast<std::size_t>(c.kernel);
  for (std::size_t i = 0; i < c.filters.size(); ++i) {
    std::size_t f = static_cast<std::size_t>(c.filters[i]);
    out.push_back({"conv" + std::to_string(i) + ".k", {f, cin, kk, kk},
                   std::sqrt(2.0 / (static_cast<double>(cin) * c.kernel * c.kernel))});
    out.push_back({"conv" + std::to_string(i) + ".b", {f}, 0.0});
    h = conv_out_dim(h, c.kernel, c.stride, c.pad, "disc conv" + std::to_string(i));
    w = conv_out_dim(w, c.kernel, c.stride, c.pad, "disc conv" + std::to_string(i));
    cin = f;
  }
  std::size_t feat = cin * h * w;
  out.push_back({"dense.w", {feat, 1}, std::sqrt(2.0 / static_cast<double>(feat))});
  out.push_back({"dense.b", {1}, 0.0});
  return out;
}

inline std::vector<ParamSpec> discriminator_param_specs(const DiscriminatorConfig& c,
                                                        ImageShape in) {
  return c.variant == DiscVariant::capsule ? capsule_disc_param_specs(c.capsule, in)
                                           : conv_disc_param_specs(c.convolutional, in);
}

inline std::vector<Param> init_params(const std::vector<ParamSpec>& specs, Rng& rng) {
  std::vector<Param> out;
  out.reserve(specs.size());
  for (const ParamSpec& s : specs) {
    Param p;
    p.name = s.name;
    p.value = Tensor(s.shape);
    if (s.init_std > 0.0)
      for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] = rng.normal(0.0, s.init_std);
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<int> stage_params(Graph& g, const std::vector<Param>& ps, bool trainable) {
  std::vector<int> ids;
  ids.reserve(ps.size());
  for (const Param& p : ps) ids.push_back(trainable ? g.parameter(p.value) : g.constant(p.value));
  return ids;
}

inline std::size_t param_count(const std::vector<Param>& ps) {
  std::size_t n = 0;
  for (const Param& p : ps) n += p.value.size();
  return n;
}

inline int generator_forward(Graph& g, const GeneratorConfig& c, const std::vector<int>& params,
                             int z) {
  int h = g.bias_add(g.matmul(z, params[0]), params[1]);
  h = g.leaky_relu(h, c.leaky_slope);
  std::size_t n = g.value(z).dim(0);
  std::size_t ph = static_cast<std::size_t>(c.proj_height);
  std::size_t pw = static_cast<std::size_t>(c.proj_width);
  h = g.reshape(h, {n, static_cast<std::size_t>(c.proj_channels), ph, pw});
  for (std::size_t i = 0; i < c.stage_channels.size(); ++i) {
    h = g.conv2d_transpose(h, params[2 + 2 * i], 2, c.pad);
    h = g.bias_add(h, params[3 + 2 * i]);
    h = (i + 1 == c.stage_channels.size()) ? g.tanh(h) : g.leaky_relu(h, c.leaky_slope);
  }
  return h;
}

struct DiscriminatorOut {
  int scores = -1;  // [B], probability-like realness score
  int norms = -1;   // [B,1] capsule lengths (capsule variant only)
  int logits = -1;  // [B,1] pre-sigmoid logits (convolutional variant only)
};

inline DiscriminatorOut capsule_disc_forward(Graph& g, const CapsDiscConfig& c,
                                             const std::vector<int>& params, int x) {
  int h = g.conv2d(x, params[0], c.conv_stride, c.conv_pad);
  h = g.bias_add(h, params[1]);
  h = g.leaky_relu(h, c.leaky_slope);
  int u = primary_capsules(g, h, params[2], params[3], c.pc_capsule_dim, c.pc_stride, c.pc_pad);
  RoutingConfig rc;
  rc.iters = c.routing_iters;
  rc.cosine_agreement = c.cosine_agreement;
  RoutedCapsules routed = routed_capsule_layer(g, u, params[4], rc);
  DiscriminatorOut out;
  out.norms = g.vector_norm(routed.output, 2);
  out.scores = g.reshape(out.norms, {g.value(out.norms).dim(0)});
  return out;
}

inline DiscriminatorOut conv_disc_forward(Graph& g, const ConvDiscConfig& c,
                                          const std::vector<int>& params, int x) {
  int h = x;
  for (std::size_t i = 0; i < c.filters.size(); ++i) {
    h = g.conv2d(h, params[2 * i], c.stride, c.pad);
    h = g.bias_add(h, params[2 * i + 1]);
    h = g.leaky_relu(h, c.leaky_slope);
  }
  const Tensor& t = g.value(h);
  std::size_t n = t.dim(0);
  h = g.reshape(h, {n, t.size() / n});
  DiscriminatorOut out;
  out.logits = g.bias_add(g.matmul(h, params[params.size() - 2]), params[params.size() - 1]);
  out.scores = g.reshape(g.sigmoid(out.logits), {n});
  return out;
}

inline DiscriminatorOut discriminator_forward(Graph& g, const DiscriminatorConfig& c,
                                              const std::vector<int>& params, int x) {
  return c.variant == DiscVariant::capsule ? capsule_disc_forward(g, c.capsule, params, x)
                                           : conv_disc_forward(g, c.convolutional, params, x);
}

}  // namespace detail

// Adversarial pair with either a capsule or a convolutional discriminator.
// The capsule variant trains both sides on margin losses over the final
// capsule length; the convolutional variant uses sigmoid cross-entropy with
// the non-saturating generator objective.
class GanModel {
 public:
  [[nodiscard]] static GanModel init(const GanConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    GanModel m;
    m.cfg_ = cfg;
    m.seed_ = seed;
    Rng rng(mix_seed(seed, 0x1417));
    m.gen_params_ = detail::init_params(detail::generator_param_specs(cfg.generator), rng);
    m.disc_params_ = detail::init_params(
        detail::discriminator_param_specs(cfg.discriminator, cfg.image_shape()), rng);
    std::size_t dcount = detail::param_count(m.disc_params_);
    if (dcount > cfg.discriminator.param_budget)
      throw ConfigError("discriminator has " + std::to_string(dcount) +
                        " parameters, budget is " + std::to_string(cfg.discriminator.param_budget));
    m.gen_opt_ = AdamState::init(cfg.generator_opt, m.gen_params_);
    m.disc_opt_ = AdamState::init(cfg.discriminator_opt, m.disc_params_);
    return m;
  }

  const GanConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  std::vector<Param>& generator_params() { return gen_params_; }
  std::vector<Param>& discriminator_params() { return disc_params_; }
  const std::vector<Param>& generator_params() const { return gen_params_; }
  const std::vector<Param>& discriminator_params() const { return disc_params_; }
  AdamState& generator_opt() { return gen_opt_; }
  AdamState& discriminator_opt() { return disc_opt_; }
  const AdamState& generator_opt() const { return gen_opt_; }
  const AdamState& discriminator_opt() const { return disc_opt_; }

  std::size_t generator_param_count() const { return detail::param_count(gen_params_); }
  std::size_t discriminator_param_count() const { return detail::param_count(disc_params_); }

  // Samples n images in (-1,1); same seed, same model -> bit-identical output.
  Tensor generate(std::size_t n, std::uint64_t seed) const {
    if (n < 1) throw std::invalid_argument("generate: n must be >= 1");
    Graph g;
    auto gp = detail::stage_params(g, gen_params_, false);
    int z = g.constant(rng_normal({n, static_cast<std::size_t>(cfg_.generator.latent_dim)}, seed));
    int out = detail::generator_forward(g, cfg_.generator, gp, z);
    return g.value(out);
  }

  // Realness scores in [0,1) per image; input must be in the (-1,1) range.
  Tensor discriminate(const Tensor& x) const {
    check_image_batch(x);
    Graph g;
    auto dp = detail::stage_params(g, disc_params_, false);
    auto out = detail::discriminator_forward(g, cfg_.discriminator, dp, g.constant(x));
    return g.value(out.scores);
  }

  double train_discriminator_step(const Tensor& real, std::uint64_t seed) {
    check_image_batch(real);
    std::size_t b = real.dim(0);
    Graph g;
    auto dp = detail::stage_params(g, disc_params_, true);
    auto gp = detail::stage_params(g, gen_params_, false);
    int z = g.constant(rng_normal({b, static_cast<std::size_t>(cfg_.generator.latent_dim)}, seed));
    int fake = detail::generator_forward(g, cfg_.generator, gp, z);
    auto real_out = detail::discriminator_forward(g, cfg_.discriminator, dp, g.constant(real));
    auto fake_out = detail::discriminator_forward(g, cfg_.discriminator, dp, fake);
    int ones = g.constant(Tensor::full({b, 1}, 1.0));
    int zeros = g.constant(Tensor({b, 1}));
    int loss;
    if (cfg_.discriminator.variant == DiscVariant::capsule)
      loss = g.add(margin_loss(g, real_out.norms, ones, cfg_.margin),
                   margin_loss(g, fake_out.norms, zeros, cfg_.margin));
    else
      loss = g.add(g.sigmoid_bce(real_out.logits, ones), g.sigmoid_bce(fake_out.logits, zeros));
    g.backward(loss);
    apply_adam(g, dp, disc_opt_, disc_params_);
    return g.value(loss)[0];
  }

  double train_generator_step(std::uint64_t seed) {
    std::size_t b = static_cast<std::size_t>(cfg_.batch_size);
    Graph g;
    auto gp = detail::stage_params(g, gen_params_, true);
    auto dp = detail::stage_params(g, disc_params_, false);
    int z = g.constant(rng_normal({b, static_cast<std::size_t>(cfg_.generator.latent_dim)}, seed));
    int fake = detail::generator_forward(g, cfg_.generator, gp, z);
    auto fake_out = detail::discriminator_forward(g, cfg_.discriminator, dp, fake);
    int ones = g.constant(Tensor::full({b, 1}, 1.0));
    int loss = cfg_.discriminator.variant == DiscVariant::capsule
                   ? margin_loss(g, fake_out.norms, ones, cfg_.margin)
                   : g.sigmoid_bce(fake_out.logits, ones);
    g.backward(loss);
    apply_adam(g, gp, gen_opt_, gen_params_);
    return g.value(loss)[0];
  }

  struct TrainHistory {
    std::vector<double> d_loss;
    std::vector<double> g_loss;
  };

  using StepCallback = std::function<void(std::size_t step, double d_loss, double g_loss)>;

  // Alternates one discriminator step and one generator step per iteration.
  // Deterministic given (model state, dataset, seed): batch order comes from
  // the seed and epoch index, per-step noise seeds derive from the root seed.
  TrainHistory train(const LabeledDataset& data, std::size_t steps, std::uint64_t seed,
                     const StepCallback& callback = {}) {
    if (steps < 1) throw std::invalid_argument("train: steps must be >= 1");
    Tensor images =
        data.range == ValueRange::raw01 ? to_signed11(data.images) : data.images;
    std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
    TrainHistory hist;
    hist.d_loss.reserve(steps);
    hist.g_loss.reserve(steps);
    std::uint64_t epoch = 0;
    auto epoch_batches = batches(data.size(), bs, seed, epoch);
    std::size_t cursor = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      if (cursor >= epoch_batches.size()) {
        epoch += 1;
        epoch_batches = batches(data.size(), bs, seed, epoch);
        cursor = 0;
      }
      Tensor real = gather_images(images, epoch_batches[cursor]);
      cursor += 1;
      double d = train_discriminator_step(real, mix_seed(seed, 2 * s + 1));
      double gl = train_generator_step(mix_seed(seed, 2 * s + 2));
      if (!std::isfinite(d) || !std::isfinite(gl))
        throw TrainingDivergedError(s, "training diverged at step " + std::to_string(s) +
                                           ": d_loss=" + std::to_string(d) +
                                           " g_loss=" + std::to_string(gl));
      hist.d_loss.push_back(d);
      hist.g_loss.push_back(gl);
      step_ += 1;
      if (callback) callback(s + 1, d, gl);
    }
    return hist;
  }

 private:
  GanConfig cfg_;
  std::uint64_t seed_ = 0;
  std::uint64_t step_ = 0;
  std::vector<Param> gen_params_, disc_params_;
  AdamState gen_opt_, disc_opt_;

  void check_image_batch(const Tensor& x) const {
    ImageShape s = cfg_.image_shape();
    if (x.rank() != 4 || x.dim(1) != s.channels || x.dim(2) != s.height || x.dim(3) != s.width)
      throw ShapeError("expected image batch [n," + std::to_string(s.channels) + "," +
                       std::to_string(s.height) + "," + std::to_string(s.width) + "], got " +
                       shape_str(x.shape()));
    if (x.dim(0) < 1) throw ShapeError("image batch is empty");
  }

  static void apply_adam(const Graph& g, const std::vector<int>& ids, AdamState& opt,
                         std::vector<Param>& params) {
    std::vector<Tensor> grads;
    grads.reserve(ids.size());
    for (int id : ids) grads.push_back(g.grad_or_zero(id));
    adam_step(opt, params, grads);
  }
};

}  // namespace capsgan
