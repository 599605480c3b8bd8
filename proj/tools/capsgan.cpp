#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "capsgan/capsgan.hpp"

namespace {

using namespace capsgan;

RunConfig build_config(const std::string& config_path, const std::string& data_kind) {
  if (!config_path.empty()) return load_run_config(config_path);
  nlohmann::json seeded{{"data", {{"kind", data_kind}}}};
  return resolve_run_config(seeded);
}

int run(int argc, char** argv) {
  CLI::App app{"capsule-discriminator GAN trainer and evaluation harness"};
  app.require_subcommand(1);

  std::string config_path;
  std::string data_kind = "synthetic";
  app.add_option("--config", config_path, "JSON run config (partial configs are overlaid on defaults)");
  app.add_option("--data", data_kind, "dataset when no config is given: synthetic, mnist, cifar10");

  auto* train = app.add_subcommand("train", "train a model from scratch");
  int steps = 0;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string variant;
  auto* opt_steps = train->add_option("--steps", steps, "training steps");
  auto* opt_seed = train->add_option("--seed", seed, "training seed");
  auto* opt_out = train->add_option("--out", out_dir, "output directory");
  auto* opt_variant =
      train->add_option("--variant", variant, "discriminator: capsule or convolutional");

  auto* generate = app.add_subcommand("generate", "sample images from a checkpoint");
  std::string checkpoint;
  std::size_t n_samples = 64;
  std::uint64_t gen_seed = 7;
  std::string gen_out = "out";
  generate->add_option("--checkpoint", checkpoint, "trained model checkpoint")->required();
  generate->add_option("--n", n_samples, "number of images");
  generate->add_option("--seed", gen_seed, "noise seed");
  generate->add_option("--out", gen_out, "output directory");

  auto* gam = app.add_subcommand("gam", "battle two checkpoints with swapped discriminators");
  std::string model1, model2, report_path;
  std::uint64_t gam_seed = 7;
  gam->add_option("--model1", model1, "first checkpoint")->required();
  gam->add_option("--model2", model2, "second checkpoint")->required();
  gam->add_option("--seed", gam_seed, "battle seed");
  gam->add_option("--report", report_path, "write the JSON report here");

  auto* semisup = app.add_subcommand("semisup", "label-spreading evaluation of a checkpoint");
  std::string ss_checkpoint, ss_report;
  int n_labeled = 0;
  std::uint64_t ss_seed = 7;
  semisup->add_option("--checkpoint", ss_checkpoint, "trained model checkpoint")->required();
  auto* opt_n_labeled = semisup->add_option("--n-labeled", n_labeled, "labeled sample count");
  semisup->add_option("--seed", ss_seed, "sampling seed");
  semisup->add_option("--report", ss_report, "write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (*train) {
    RunConfig rc = build_config(config_path, data_kind);
    if (*opt_steps) rc.training.steps = steps;
    if (*opt_seed) rc.training.seed = seed;
    if (*opt_out) rc.output.dir = out_dir;
    if (*opt_variant) rc.model.discriminator.variant = disc_variant_from_string(variant);
    auto outcome = cmd_train(rc);
    std::cout << "checkpoint " << outcome.checkpoint_path << "\n";
    std::cout << "final d_loss " << outcome.history.d_loss.back() << " g_loss "
              << outcome.history.g_loss.back() << "\n";
  } else if (*generate) {
    auto res = cmd_generate(checkpoint, n_samples, gen_seed, gen_out);
    std::cout << "wrote " << res.png_path << " and " << res.dump_path << "\n";
  } else if (*gam) {
    RunConfig rc = build_config(config_path, data_kind);
    GamReport r = cmd_gam(model1, model2, rc, gam_seed, report_path);
    std::cout << "r_samples " << r.r_samples << "\nr_test " << r.r_test << "\nverdict "
              << to_string(r.verdict) << "\n";
  } else if (*semisup) {
    RunConfig rc = build_config(config_path, data_kind);
    if (*opt_n_labeled) rc.evaluation.semisup_n_labeled = n_labeled;
    SemiSupReport r = cmd_semisup(ss_checkpoint, rc, ss_seed, ss_report);
    std::cout << "error_rate " << r.error_rate << "\ntest_accuracy " << r.test_accuracy << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace capsgan;
  try {
    return run(argc, argv);
  } catch (const TrainingDivergedError& e) {
    log_error(e.what());
    return 2;
  } catch (const DegenerateBattleError& e) {
    log_error(e.what());
    return 2;
  } catch (const StratificationError& e) {
    log_error(e.what());
    return 2;
  } catch (const IoError& e) {
    log_error(e.what());
    return 3;
  } catch (const DataFormatError& e) {
    log_error(e.what());
    return 3;
  } catch (const CheckpointError& e) {
    log_error(e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    log_error(e.what());
    return 1;
  } catch (const std::exception& e) {
    log_error(e.what());
    return 1;
  }
}
