#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capsgan/checkpoint.hpp"
#include "capsgan/config.hpp"
#include "capsgan/evaluation.hpp"
#include "capsgan/image_io.hpp"
#include "capsgan/log.hpp"

namespace capsgan {
namespace detail {

inline void ensure_dir(const std::string& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << content;
  if (!f) throw IoError("short write to " + path);
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string step_checkpoint_name(int step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%06d.ckpt", step);
  return buf;
}

}  // namespace detail

inline void to_json(nlohmann::json& j, const GamReport& r) {
  j = nlohmann::json{{"r_samples", r.r_samples},
                     {"r_test", r.r_test},
                     {"acc_d1_on_g2", r.acc_d1_on_g2},
                     {"acc_d2_on_g1", r.acc_d2_on_g1},
                     {"acc_d1_on_test", r.acc_d1_on_test},
                     {"acc_d2_on_test", r.acc_d2_on_test},
                     {"verdict", to_string(r.verdict)},
                     {"n_samples", r.n_samples},
                     {"n_test", r.n_test},
                     {"threshold", r.threshold},
                     {"tie_tolerance", r.tie_tolerance},
                     {"seed", r.seed}};
}

inline void to_json(nlohmann::json& j, const SemiSupReport& r) {
  j = nlohmann::json{{"variant", r.variant},
                     {"n_labeled", r.n_labeled},
                     {"n_unlabeled", r.n_unlabeled},
                     {"n_test", r.n_test},
                     {"error_rate", r.error_rate},
                     {"test_accuracy", r.test_accuracy},
                     {"spread_iterations", r.spread_iterations},
                     {"spread_converged", r.spread_converged},
                     {"seed", r.seed}};
}

// Published full-scale numbers, attached to every evaluation report so a
// desk-scale result can be read next to them.
inline nlohmann::json reference_results_json() {
  namespace rr = reference_results;
  nlohmann::json semisup = nlohmann::json::array();
  for (int i = 0; i < 3; ++i)
    semisup.push_back({{"n_labeled", rr::kSemisupNLabeled[i]},
                       {"mnist", {{"convolutional", rr::kMnistSemisupError[i][0]},
                                  {"capsule", rr::kMnistSemisupError[i][1]}}},
                       {"cifar10", {{"convolutional", rr::kCifar10SemisupError[i][0]},
                                    {"capsule", rr::kCifar10SemisupError[i][1]}}}});
  return nlohmann::json{
      {"gam_vs_dcgan",
       {{"mnist", {{"r_samples", rr::kMnistGamRSamples}, {"r_test", rr::kMnistGamRTest}}},
        {"cifar10",
         {{"r_samples", rr::kCifar10GamRSamples}, {"r_test", rr::kCifar10GamRTest}}}}},
      {"semisup_error", semisup}};
}

struct TrainOutcome {
  std::string checkpoint_path;
  GanModel::TrainHistory history;
};

// Trains from scratch per the run config. Writes into output.dir: the fully
// resolved config, a tab-separated loss history, optional periodic
// checkpoints, the final checkpoint, and a sample grid. If training diverges
// the last finite state is saved as diverged.ckpt before the error escapes.
inline TrainOutcome cmd_train(const RunConfig& rc) {
  rc.validate();
  detail::ensure_dir(rc.output.dir);
  std::filesystem::path out(rc.output.dir);

  nlohmann::json resolved = rc;
  detail::write_text_file((out / "config.json").string(), resolved.dump(2) + "\n");

  LabeledDataset train = load_train_data(rc.data);
  GanModel model = GanModel::init(rc.model, rc.training.seed);
  log_info("training " + to_string(rc.model.discriminator.variant) + " discriminator, " +
           std::to_string(model.generator_param_count()) + " generator / " +
           std::to_string(model.discriminator_param_count()) + " discriminator params, " +
           std::to_string(rc.training.steps) + " steps");

  std::string history_text = "step\td_loss\tg_loss\n";
  TrainOutcome outcome;
  auto on_step = [&](std::size_t step, double d_loss, double g_loss) {
    history_text += std::to_string(step) + "\t" + detail::format_double(d_loss) + "\t" +
                    detail::format_double(g_loss) + "\n";
    std::size_t log_every = static_cast<std::size_t>(rc.training.log_every);
    if (step % log_every == 0 || step == static_cast<std::size_t>(rc.training.steps))
      log_info("step " + std::to_string(step) + " d_loss " + detail::format_double(d_loss) +
               " g_loss " + detail::format_double(g_loss));
    if (rc.training.checkpoint_every > 0 &&
        step % static_cast<std::size_t>(rc.training.checkpoint_every) == 0 &&
        step != static_cast<std::size_t>(rc.training.steps))
      save_checkpoint(model, (out / detail::step_checkpoint_name(static_cast<int>(step))).string());
  };

  try {
    outcome.history = model.train(train, rc.training.steps, rc.training.seed, on_step);
  } catch (const TrainingDivergedError&) {
    detail::write_text_file((out / "history.tsv").string(), history_text);
    save_checkpoint(model, (out / "diverged.ckpt").string());
    throw;
  }
  detail::write_text_file((out / "history.tsv").string(), history_text);

  outcome.checkpoint_path = (out / "model.ckpt").string();
  save_checkpoint(model, outcome.checkpoint_path);
  Tensor samples = model.generate(64, mix_seed(rc.training.seed, 0x5A));
  write_image_grid_png((out / "samples.png").string(), samples);
  return outcome;
}

struct GenerateOutcome {
  std::string png_path;
  std::string dump_path;
};

inline GenerateOutcome cmd_generate(const std::string& checkpoint_path, std::size_t n,
                                    std::uint64_t seed, const std::string& out_dir) {
  if (n < 1) throw std::invalid_argument("generate: n must be >= 1");
  GanModel model = load_checkpoint(checkpoint_path);
  Tensor images = model.generate(n, seed);
  detail::ensure_dir(out_dir);
  std::filesystem::path out(out_dir);
  GenerateOutcome res;
  res.png_path = (out / "samples.png").string();
  res.dump_path = (out / "samples.cgtd").string();
  write_image_grid_png(res.png_path, images);
  write_tensor_dump(res.dump_path, images);
  return res;
}

// Runs the swap battle in both orientations and writes one report. The
// verdict comes from the forward orientation; the reversed run is included
// so the symmetry of the protocol is visible in the output.
inline GamReport cmd_gam(const std::string& ckpt1, const std::string& ckpt2, const RunConfig& rc,
                         std::uint64_t seed, const std::string& report_path) {
  GanModel m1 = load_checkpoint(ckpt1);
  GanModel m2 = load_checkpoint(ckpt2);
  LabeledDataset test = load_test_data(rc.data);
  Tensor test_images = to_signed11(test.images);
  GamReport forward = gam_battle(m1, m2, test_images, rc.evaluation.gam, seed);
  GamReport reversed = gam_battle(m2, m1, test_images, rc.evaluation.gam, seed);
  nlohmann::json j{{"model1", ckpt1},
                   {"model2", ckpt2},
                   {"data", to_string(rc.data.kind)},
                   {"forward", forward},
                   {"reversed", reversed},
                   {"reference", reference_results_json()}};
  if (!report_path.empty()) {
    detail::ensure_dir(std::filesystem::path(report_path).parent_path().string());
    detail::write_text_file(report_path, j.dump(2) + "\n");
  }
  log_info("gam: r_samples " + detail::format_double(forward.r_samples) + " r_test " +
           detail::format_double(forward.r_test) + " verdict " + to_string(forward.verdict));
  return forward;
}

inline SemiSupReport cmd_semisup(const std::string& ckpt, const RunConfig& rc,
                                 std::uint64_t seed, const std::string& report_path) {
  GanModel model = load_checkpoint(ckpt);
  LabeledDataset train = load_train_data(rc.data);
  LabeledDataset test = load_test_data(rc.data);
  SemiSupReport report = semi_sup_experiment(model, train, test, rc.evaluation.semisup_n_labeled,
                                             rc.evaluation.semisup, seed);
  nlohmann::json j{{"checkpoint", ckpt},
                   {"data", to_string(rc.data.kind)},
                   {"report", report},
                   {"reference", reference_results_json()}};
  if (!report_path.empty()) {
    detail::ensure_dir(std::filesystem::path(report_path).parent_path().string());
    detail::write_text_file(report_path, j.dump(2) + "\n");
  }
  log_info("semisup: error_rate " + detail::format_double(report.error_rate) + " over " +
           std::to_string(report.n_test) + " test points");
  return report;
}

}  // namespace capsgan
