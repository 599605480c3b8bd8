#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "capsgan/datasets.hpp"
#include "capsgan/errors.hpp"
#include "capsgan/gan.hpp"
#include "capsgan/log.hpp"
#include "capsgan/rng.hpp"
#include "capsgan/tensor.hpp"

namespace capsgan {

inline double accuracy(const std::vector<int>& predictions, const std::vector<int>& targets) {
  if (predictions.empty() || predictions.size() != targets.size())
    throw std::invalid_argument("accuracy: " + std::to_string(predictions.size()) +
                                " predictions vs " + std::to_string(targets.size()) + " targets");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == targets[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// Published full-scale results, embedded in reports for context. Desk-scale
// runs are not expected to land near these.
namespace reference_results {
constexpr double kMnistGamRSamples = 0.79;
constexpr double kMnistGamRTest = 1.0;
constexpr double kCifar10GamRSamples = 1.0;
constexpr double kCifar10GamRTest = 0.72;
constexpr int kSemisupNLabeled[3] = {100, 1000, 10000};
// columns: convolutional discriminator, capsule discriminator
constexpr double kMnistSemisupError[3][2] = {{0.2900, 0.2724},
                                             {0.1539, 0.1142},
                                             {0.0702, 0.0531}};
constexpr double kCifar10SemisupError[3][2] = {{0.8305, 0.7983},
                                               {0.7587, 0.7496},
                                               {0.7209, 0.7102}};
}  // namespace reference_results

enum class GamVerdict { model1_wins, model2_wins, tie };

inline std::string to_string(GamVerdict v) {
  switch (v) {
    case GamVerdict::model1_wins: return "model1_wins";
    case GamVerdict::model2_wins: return "model2_wins";
    default: return "tie";
  }
}

struct GamOptions {
  std::size_t n_samples = 1024;
  double threshold = 0.5;
  double tie_tolerance = 0.05;
};

struct GamReport {
  double r_samples = 0.0;  // acc(D1 on G2 fakes) / acc(D2 on G1 fakes)
  double r_test = 0.0;     // acc(D1 on real test) / acc(D2 on real test)
  double acc_d1_on_g2 = 0.0;
  double acc_d2_on_g1 = 0.0;
  double acc_d1_on_test = 0.0;
  double acc_d2_on_test = 0.0;
  GamVerdict verdict = GamVerdict::tie;
  std::size_t n_samples = 0;
  std::size_t n_test = 0;
  double threshold = 0.5;
  double tie_tolerance = 0.0;
  std::uint64_t seed = 0;
};

namespace detail {

inline double fraction_below(const Tensor& scores, double threshold) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] < threshold) ++hits;
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

inline double fraction_at_least(const Tensor& scores, double threshold) {
  return 1.0 - fraction_below(scores, threshold);
}

// Symmetric closeness to 1, so that inverting the ratio gives the same
// answer: max(r, 1/r) <= 1 + tol.
inline bool ratio_near_one(double r, double tol) {
  if (!(r > 0.0)) return false;
  return std::max(r, 1.0 / r) <= 1.0 + tol;
}

}  // namespace detail

// Discriminator swap battle. Each discriminator judges the other generator's
// samples and the shared real test set; accuracy ratios decide the outcome.
// Model 2 formally wins when r_samples < 1 while r_test stays within the tie
// tolerance of 1 (model 1 symmetrically); everything else is a tie. Both
// generators sample from the same derived noise seed, so a battle of a
// checkpoint against itself ties with both ratios exactly 1.
inline GamReport gam_battle(const GanModel& m1, const GanModel& m2, const Tensor& test_images,
                            const GamOptions& opts, std::uint64_t seed) {
  if (opts.n_samples < 1) throw std::invalid_argument("gam_battle: n_samples must be >= 1");
  if (test_images.rank() != 4 || test_images.dim(0) < 1)
    throw std::invalid_argument("gam_battle: test_images must be a non-empty [N,C,H,W] batch");

  std::uint64_t z_seed = mix_seed(seed, 0x6A4D);
  Tensor fakes1 = m1.generate(opts.n_samples, z_seed);
  Tensor fakes2 = m2.generate(opts.n_samples, z_seed);

  GamReport r;
  r.n_samples = opts.n_samples;
  r.n_test = test_images.dim(0);
  r.threshold = opts.threshold;
  r.tie_tolerance = opts.tie_tolerance;
  r.seed = seed;
  r.acc_d1_on_g2 = detail::fraction_below(m1.discriminate(fakes2), opts.threshold);
  r.acc_d2_on_g1 = detail::fraction_below(m2.discriminate(fakes1), opts.threshold);
  r.acc_d1_on_test = detail::fraction_at_least(m1.discriminate(test_images), opts.threshold);
  r.acc_d2_on_test = detail::fraction_at_least(m2.discriminate(test_images), opts.threshold);

  if (r.acc_d2_on_g1 == 0.0)
    throw DegenerateBattleError(
        "gam_battle: discriminator 2 scored every sample from generator 1 as real, "
        "sample ratio is undefined");
  if (r.acc_d2_on_test == 0.0)
    throw DegenerateBattleError(
        "gam_battle: discriminator 2 scored every real test image as fake, "
        "test ratio is undefined");
  r.r_samples = r.acc_d1_on_g2 / r.acc_d2_on_g1;
  r.r_test = r.acc_d1_on_test / r.acc_d2_on_test;

  bool close = detail::ratio_near_one(r.r_test, opts.tie_tolerance);
  if (close && r.r_samples < 1.0)
    r.verdict = GamVerdict::model2_wins;
  else if (close && r.r_samples > 1.0)
    r.verdict = GamVerdict::model1_wins;
  else
    r.verdict = GamVerdict::tie;
  return r;
}

struct LabelSpreadConfig {
  enum class Affinity { knn, rbf };
  double alpha = 0.2;
  Affinity affinity = Affinity::knn;
  int k = 7;
  double gamma = 0.0;  // <= 0 means 1 / feature_dim
  int max_iters = 1000;
  double tol = 1e-6;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("label_spread: alpha must be in (0,1)");
    if (affinity == Affinity::knn && k < 1) throw ConfigError("label_spread: k must be >= 1");
    if (max_iters < 1) throw ConfigError("label_spread: max_iters must be >= 1");
    if (!(tol > 0.0)) throw ConfigError("label_spread: tol must be positive");
  }
};

struct LabelSpreadResult {
  std::vector<int> labels;   // final label per node
  Tensor scores;             // F [N,K]
  int iterations = 0;
  bool converged = false;
  std::vector<std::size_t> prior_assigned;  // nodes that fell back to the label prior
};

namespace detail {

using SparseRows = std::vector<std::vector<std::pair<int, double>>>;

inline SparseRows knn_affinity(const Tensor& features, int k) {
  std::size_t n = features.dim(0);
  std::size_t d = features.dim(1);
  std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), n - 1);
  std::vector<std::vector<int>> neighbors(n);
  std::vector<std::pair<double, int>> dist;
  for (std::size_t i = 0; i < n; ++i) {
    dist.clear();
    const double* fi = features.data() + i * d;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double* fj = features.data() + j * d;
      double d2 = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        double delta = fi[a] - fj[a];
        d2 += delta * delta;
      }
      dist.emplace_back(d2, static_cast<int>(j));
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
    auto& nb = neighbors[i];
    for (std::size_t t = 0; t < kk; ++t) nb.push_back(dist[t].second);
    std::sort(nb.begin(), nb.end());
  }
  // Mutual graph: unit weight where each point is in the other's k-set.
  SparseRows rows(n);
  for (std::size_t i = 0; i < n; ++i)
    for (int j : neighbors[i]) {
      const auto& nb = neighbors[static_cast<std::size_t>(j)];
      if (std::binary_search(nb.begin(), nb.end(), static_cast<int>(i)))
        rows[i].emplace_back(j, 1.0);
    }
  return rows;
}

inline SparseRows rbf_affinity(const Tensor& features, double gamma) {
  std::size_t n = features.dim(0);
  std::size_t d = features.dim(1);
  SparseRows rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* fi = features.data() + i * d;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;  // self-affinity stays zero
      const double* fj = features.data() + j * d;
      double d2 = 0.0;
      for (std::size_t a = 0; a < d; ++a) {
        double delta = fi[a] - fj[a];
        d2 += delta * delta;
      }
      rows[i].emplace_back(static_cast<int>(j), std::exp(-gamma * d2));
    }
  }
  return rows;
}

// S = D^(-1/2) W D^(-1/2); rows with zero degree stay empty.
inline void normalize_affinity(SparseRows& rows) {
  std::size_t n = rows.size();
  std::vector<double> inv_sqrt_deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (const auto& e : rows[i]) deg += e.second;
    if (deg > 0.0) inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < n; ++i)
    for (auto& e : rows[i])
      e.second *= inv_sqrt_deg[i] * inv_sqrt_deg[static_cast<std::size_t>(e.first)];
}

}  // namespace detail

// Semi-supervised label spreading on raw features. labels[i] in [0,K) marks a
// seed node, -1 an unlabeled one. Iterates F <- alpha*S*F + (1-alpha)*Y from
// F = Y until the largest entry change drops below tol. Nodes that no label
// mass can reach fall back to the majority label of the seeds.
inline LabelSpreadResult label_spread(const Tensor& features, const std::vector<int>& labels,
                                      int class_count, const LabelSpreadConfig& cfg) {
  cfg.validate();
  if (features.rank() != 2 || features.dim(0) != labels.size())
    throw ShapeError("label_spread: features " + shape_str(features.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  if (class_count < 1) throw std::invalid_argument("label_spread: class_count must be >= 1");
  std::size_t n = features.dim(0);
  std::size_t K = static_cast<std::size_t>(class_count);
  std::vector<std::size_t> class_freq(K, 0);
  std::size_t n_labeled = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0) continue;
    if (labels[i] >= class_count)
      throw std::invalid_argument("label_spread: label " + std::to_string(labels[i]) +
                                  " out of range at node " + std::to_string(i));
    class_freq[static_cast<std::size_t>(labels[i])] += 1;
    n_labeled += 1;
  }
  if (n_labeled == 0) throw std::invalid_argument("label_spread: no labeled nodes");

  detail::SparseRows S;
  if (cfg.affinity == LabelSpreadConfig::Affinity::knn) {
    if (n < 2) throw std::invalid_argument("label_spread: knn affinity needs at least 2 nodes");
    S = detail::knn_affinity(features, cfg.k);
  } else {
    double gamma = cfg.gamma > 0.0 ? cfg.gamma : 1.0 / static_cast<double>(features.dim(1));
    S = detail::rbf_affinity(features, gamma);
  }
  detail::normalize_affinity(S);

  Tensor Y({n, K});
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] >= 0) Y[i * K + static_cast<std::size_t>(labels[i])] = 1.0;

  LabelSpreadResult res;
  res.scores = Y;
  Tensor next({n, K});
  for (int it = 0; it < cfg.max_iters; ++it) {
    double delta = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < K; ++c) next[i * K + c] = 0.0;
      for (const auto& e : S[i]) {
        const double* fj = res.scores.data() + static_cast<std::size_t>(e.first) * K;
        double w = e.second;
        for (std::size_t c = 0; c < K; ++c) next[i * K + c] += w * fj[c];
      }
      for (std::size_t c = 0; c < K; ++c) {
        double v = cfg.alpha * next[i * K + c] + (1.0 - cfg.alpha) * Y[i * K + c];
        delta = std::max(delta, std::abs(v - res.scores[i * K + c]));
        next[i * K + c] = v;
      }
    }
    std::swap(res.scores, next);
    res.iterations = it + 1;
    if (delta < cfg.tol) {
      res.converged = true;
      break;
    }
  }
  if (!res.converged)
    log_info("label_spread: no convergence after " + std::to_string(res.iterations) +
             " iterations");

  int prior = 0;
  for (std::size_t c = 1; c < K; ++c)
    if (class_freq[c] > class_freq[static_cast<std::size_t>(prior)]) prior = static_cast<int>(c);
  res.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = res.scores.data() + i * K;
    double mass = 0.0;
    std::size_t best = 0;
    for (std::size_t c = 0; c < K; ++c) {
      mass += row[c];
      if (row[c] > row[best]) best = c;
    }
    if (mass > 0.0) {
      res.labels[i] = static_cast<int>(best);
    } else {
      res.labels[i] = prior;
      res.prior_assigned.push_back(i);
    }
  }
  if (!res.prior_assigned.empty())
    log_info("label_spread: " + std::to_string(res.prior_assigned.size()) +
             " unreachable nodes assigned the label prior");
  return res;
}

// Convenience wrapper: seeds from a labeled dataset, plus an unlabeled image
// batch appended as extra nodes. Features are flattened pixels in [0,1].
inline LabelSpreadResult label_spread_fit(const LabeledDataset& labeled,
                                          const Tensor& unlabeled_images,
                                          const LabelSpreadConfig& cfg) {
  if (labeled.size() == 0) throw std::invalid_argument("label_spread_fit: no labeled data");
  const Tensor& li = labeled.images;
  std::size_t px = li.size() / li.dim(0);
  std::size_t n_u = unlabeled_images.empty() ? 0 : unlabeled_images.dim(0);
  if (n_u > 0 && unlabeled_images.size() / n_u != px)
    throw ShapeError("label_spread_fit: unlabeled images " +
                     shape_str(unlabeled_images.shape()) + " do not match labeled pixel count " +
                     std::to_string(px));
  Tensor features({labeled.size() + n_u, px});
  std::copy(li.data(), li.data() + li.size(), features.data());
  if (n_u > 0)
    std::copy(unlabeled_images.data(), unlabeled_images.data() + unlabeled_images.size(),
              features.data() + li.size());
  std::vector<int> labels(labeled.size() + n_u, -1);
  for (std::size_t i = 0; i < labeled.size(); ++i) labels[i] = labeled.labels[i];
  return label_spread(features, labels, labeled.class_count, cfg);
}

struct SemiSupConfig {
  int n_unlabeled = 50000;
  LabelSpreadConfig spread{};

  void validate() const {
    if (n_unlabeled < 0) throw ConfigError("semisup: n_unlabeled must be >= 0");
    spread.validate();
  }
};

struct SemiSupReport {
  std::string variant;
  int n_labeled = 0;
  int n_unlabeled = 0;
  std::size_t n_test = 0;
  double error_rate = 0.0;
  double test_accuracy = 0.0;
  int spread_iterations = 0;
  bool spread_converged = false;
  std::uint64_t seed = 0;
};

namespace detail {

// Proportional allocation with every present class guaranteed one slot.
inline std::vector<std::size_t> stratified_sample(const std::vector<int>& labels, int class_count,
                                                  std::size_t n_labeled, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(class_count));
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < by_class.size(); ++c)
    if (!by_class[c].empty()) present.push_back(c);
  if (n_labeled < present.size())
    throw StratificationError("stratified sample of " + std::to_string(n_labeled) +
                              " cannot cover " + std::to_string(present.size()) + " classes");
  if (n_labeled > labels.size())
    throw std::invalid_argument("stratified sample of " + std::to_string(n_labeled) +
                                " exceeds dataset size " + std::to_string(labels.size()));
  std::vector<std::size_t> quota(by_class.size(), 0);
  for (std::size_t c : present) quota[c] = 1;
  std::size_t remaining = n_labeled - present.size();
  double total = static_cast<double>(labels.size());
  while (remaining > 0) {
    double best_gap = -1.0;
    std::size_t best_c = by_class.size();
    for (std::size_t c : present) {
      if (quota[c] >= by_class[c].size()) continue;
      double share = static_cast<double>(n_labeled) *
                     static_cast<double>(by_class[c].size()) / total;
      double gap = share - static_cast<double>(quota[c]);
      if (gap > best_gap) {
        best_gap = gap;
        best_c = c;
      }
    }
    quota[best_c] += 1;
    remaining -= 1;
  }
  std::vector<std::size_t> picked;
  for (std::size_t c : present) {
    auto& idx = by_class[c];
    Rng rng(mix_seed(seed, c));
    for (std::size_t i = idx.size() - 1; i > 0; --i)
      std::swap(idx[i], idx[rng.next_u64() % (i + 1)]);
    picked.insert(picked.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(quota[c]));
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

}  // namespace detail

// Transductive protocol: a few real labeled points, a pool of generated
// unlabeled images, and the real test points all enter one spreading graph;
// test predictions are read off the spread scores.
inline SemiSupReport semi_sup_experiment(const GanModel& model, const LabeledDataset& real_train,
                                         const LabeledDataset& real_test, int n_labeled,
                                         const SemiSupConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (n_labeled < 1) throw std::invalid_argument("semisup: n_labeled must be >= 1");
  if (real_train.size() == 0 || real_test.size() == 0)
    throw std::invalid_argument("semisup: train and test sets must be non-empty");
  if (real_train.range != ValueRange::raw01 || real_test.range != ValueRange::raw01)
    throw std::invalid_argument("semisup: expects datasets in the [0,1] range");

  auto picked = detail::stratified_sample(real_train.labels, real_train.class_count,
                                          static_cast<std::size_t>(n_labeled),
                                          mix_seed(seed, 0x51));
  std::size_t px = real_train.images.size() / real_train.images.dim(0);
  std::size_t n_l = picked.size();
  std::size_t n_u = static_cast<std::size_t>(cfg.n_unlabeled);
  std::size_t n_t = real_test.size();

  Tensor features({n_l + n_u + n_t, px});
  std::vector<int> labels(n_l + n_u + n_t, -1);
  for (std::size_t i = 0; i < n_l; ++i) {
    const double* src = real_train.images.data() + picked[i] * px;
    std::copy(src, src + px, features.data() + i * px);
    labels[i] = real_train.labels[picked[i]];
  }
  if (n_u > 0) {
    Tensor generated = to_raw01(model.generate(n_u, mix_seed(seed, 0x52)));
    std::copy(generated.data(), generated.data() + generated.size(),
              features.data() + n_l * px);
  }
  std::copy(real_test.images.data(), real_test.images.data() + real_test.images.size(),
            features.data() + (n_l + n_u) * px);

  auto spread = label_spread(features, labels, real_train.class_count, cfg.spread);

  std::vector<int> predictions(spread.labels.begin() + static_cast<std::ptrdiff_t>(n_l + n_u),
                               spread.labels.end());
  SemiSupReport report;
  report.variant = to_string(model.config().discriminator.variant);
  report.n_labeled = static_cast<int>(n_l);
  report.n_unlabeled = static_cast<int>(n_u);
  report.n_test = n_t;
  report.test_accuracy = accuracy(predictions, real_test.labels);
  report.error_rate = 1.0 - report.test_accuracy;
  report.spread_iterations = spread.iterations;
  report.spread_converged = spread.converged;
  report.seed = seed;
  return report;
}

}  // namespace capsgan
