#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "modenorm/checkpoint.hpp"
#include "modenorm/errors.hpp"
#include "modenorm/run.hpp"

namespace {

using namespace modenorm;

// Everything RunConfig holds, bound as CLI flags; norm arrives as a name and
// is resolved after parsing.
struct RunArgs {
  RunConfig cfg;
  std::string norm = "bn";
};

void add_run_options(CLI::App* cmd, RunArgs& args) {
  cmd->add_option("--norm", args.norm, "normalization kind: bn, in, ln, gn, mn, mgn")
      ->check(CLI::IsMember({"bn", "in", "ln", "gn", "mn", "mgn"}));
  cmd->add_option("--modes", args.cfg.modes, "mode count K for mn/mgn");
  cmd->add_option("--groups", args.cfg.groups, "group count for gn");
  cmd->add_option("--batch-size", args.cfg.batch_size, "training batch size");
  cmd->add_option("--epochs", args.cfg.epochs, "training epochs");
  cmd->add_option("--lr", args.cfg.lr, "initial learning rate");
  cmd->add_option("--momentum", args.cfg.momentum, "SGD momentum");
  cmd->add_option("--weight-decay", args.cfg.weight_decay, "L2 penalty coupled into SGD");
  cmd->add_option("--lambda", args.cfg.lambda, "running-statistics blend weight in (0,1]");
  cmd->add_option("--eps", args.cfg.eps, "variance guard epsilon");
  cmd->add_option("--seed", args.cfg.seed, "run seed; derives data, init and shuffle streams");
  cmd->add_option("--data", args.cfg.data, "data source: synth or idx")
      ->check(CLI::IsMember({"synth", "idx"}));
  cmd->add_option("--data-dir", args.cfg.data_dir, "directory with IDX files");
  cmd->add_option("--milestones", args.cfg.milestones,
                  "epochs at which lr drops x0.1 (default: 65% and 80% of epochs)")
      ->delimiter(',');
  cmd->add_option("--out", args.cfg.out_dir, "output directory for metrics and checkpoint");
  cmd->add_option("--synth-modes", args.cfg.synth.modes, "synth: mixture component count");
  cmd->add_option("--synth-classes", args.cfg.synth.classes, "synth: class count");
  cmd->add_option("--synth-train-samples", args.cfg.synth.train_samples, "synth: train size");
  cmd->add_option("--synth-test-samples", args.cfg.synth.test_samples, "synth: test size");
  cmd->add_option("--synth-channels", args.cfg.synth.channels, "synth: feature channels");
  cmd->add_option("--synth-height", args.cfg.synth.height, "synth: feature height");
  cmd->add_option("--synth-width", args.cfg.synth.width, "synth: feature width");
  cmd->add_option("--synth-separation", args.cfg.synth.separation, "synth: mode shift");
  cmd->add_option("--synth-scale-ratio", args.cfg.synth.scale_ratio, "synth: mode scale ratio");
  cmd->add_option("--synth-template-scale", args.cfg.synth.template_scale,
                  "synth: class template scale");
  cmd->add_option("--synth-noise", args.cfg.synth.noise, "synth: per-sample noise scale");
  cmd->add_option("--synth-mixture", args.cfg.synth.mixture, "synth: mode weights")
      ->delimiter(',');
}

void print_metrics(const char* label, const EpochMetrics& m) {
  std::string line = std::string(label) + " loss=" + fmt_double(m.loss) +
                     " error_rate=" + fmt_double(m.error_rate);
  if (!m.gate_usage.empty()) {
    line += " gate_usage=";
    for (std::size_t k = 0; k < m.gate_usage.size(); ++k) {
      if (k) line += ',';
      line += fmt_double(m.gate_usage[k]);
    }
  }
  std::printf("%s\n", line.c_str());
}

int run_cli(int argc, char** argv) {
  CLI::App app{"mode-normalization training and analysis harness"};
  app.require_subcommand(1);

  RunArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model and write metrics + checkpoint");
  add_run_options(train_cmd, train_args);

  std::string eval_ckpt, eval_data, eval_data_dir;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on its test split");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "MNCP checkpoint path")->required();
  eval_cmd->add_option("--data", eval_data, "override data source: synth or idx")
      ->check(CLI::IsMember({"synth", "idx"}));
  eval_cmd->add_option("--data-dir", eval_data_dir, "override IDX directory");

  std::string gc_layer = "all";
  std::uint64_t gc_seed = 0;
  std::size_t gc_trials = 20;
  double gc_rtol = 1e-5, gc_atol = 1e-8;
  CLI::App* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient certification");
  gc_cmd->add_option("--layer", gc_layer, "target: all, bn, in, ln, gn, mn, mgn, dense, xent");
  gc_cmd->add_option("--seed", gc_seed, "base seed for the randomized instances");
  gc_cmd->add_option("--trials", gc_trials, "random instances per target");
  gc_cmd->add_option("--rtol", gc_rtol, "relative tolerance");
  gc_cmd->add_option("--atol", gc_atol, "absolute tolerance");

  RunArgs sweep_args;
  std::vector<std::size_t> sweep_batches{32, 128, 512};
  std::vector<std::size_t> sweep_modes{1, 2, 4, 6};
  std::size_t sweep_seeds = 5;
  CLI::App* sweep_cmd =
      app.add_subcommand("sweep", "mode-normalization grid over batch sizes x mode counts");
  add_run_options(sweep_cmd, sweep_args);
  sweep_cmd->add_option("--batch-sizes", sweep_batches, "batch sizes to sweep")->delimiter(',');
  sweep_cmd->add_option("--mode-counts", sweep_modes, "mode counts to sweep")->delimiter(',');
  sweep_cmd->add_option("--seeds", sweep_seeds, "seeds per grid cell");

  std::string gates_ckpt, gates_data, gates_data_dir;
  std::size_t gates_top = 8;
  CLI::App* gates_cmd =
      app.add_subcommand("gates-report", "per-mode gate usage, top samples and purity");
  gates_cmd->add_option("--checkpoint", gates_ckpt, "MNCP checkpoint path")->required();
  gates_cmd->add_option("--data", gates_data, "override data source: synth or idx")
      ->check(CLI::IsMember({"synth", "idx"}));
  gates_cmd->add_option("--data-dir", gates_data_dir, "override IDX directory");
  gates_cmd->add_option("--top-p", gates_top, "samples listed per mode");

  SynthConfig synth_cfg;
  std::string synth_out = "synth.mncp";
  CLI::App* synth_cmd = app.add_subcommand("synth", "generate the synthetic dataset bundle");
  synth_cmd->add_option("--modes", synth_cfg.modes, "mixture component count");
  synth_cmd->add_option("--classes", synth_cfg.classes, "class count");
  synth_cmd->add_option("--train-samples", synth_cfg.train_samples, "train split size");
  synth_cmd->add_option("--test-samples", synth_cfg.test_samples, "test split size");
  synth_cmd->add_option("--channels", synth_cfg.channels, "feature channels");
  synth_cmd->add_option("--height", synth_cfg.height, "feature height");
  synth_cmd->add_option("--width", synth_cfg.width, "feature width");
  synth_cmd->add_option("--separation", synth_cfg.separation, "mode shift magnitude");
  synth_cmd->add_option("--scale-ratio", synth_cfg.scale_ratio, "largest/smallest mode scale");
  synth_cmd->add_option("--template-scale", synth_cfg.template_scale, "class template scale");
  synth_cmd->add_option("--noise", synth_cfg.noise, "per-sample noise scale");
  synth_cmd->add_option("--mixture", synth_cfg.mixture, "mode weights (default uniform)")
      ->delimiter(',');
  synth_cmd->add_option("--seed", synth_cfg.seed, "generator seed");
  synth_cmd->add_option("--out", synth_out, "output bundle path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  if (train_cmd->parsed()) {
    train_args.cfg.norm = parse_norm_kind(train_args.norm);
    const TrainResult res = run_train(train_args.cfg);
    if (!res.metrics_path.empty()) {
      std::printf("wrote %s\n", res.metrics_path.c_str());
      std::printf("wrote %s\n", res.checkpoint_path.c_str());
    }
    print_metrics("final train", res.final_train);
    print_metrics("final test", res.final_test);
    return 0;
  }

  if (eval_cmd->parsed()) {
    EvalResult res = run_eval(eval_ckpt, eval_data, eval_data_dir);
    std::printf("%s\n", res.line.c_str());
    // Eval mutates nothing, so the rewrite reproduces the file byte for byte.
    checkpoint_save(model_to_checkpoint(res.model, res.cfg, res.input_shape, res.classes),
                    eval_ckpt);
    return 0;
  }

  if (gc_cmd->parsed()) {
    const auto summaries = run_gradcheck(gc_layer, gc_seed, gc_trials, gc_rtol, gc_atol);
    std::size_t failed = 0;
    for (const GradcheckSummary& s : summaries) {
      std::printf("%-6s %s\n", s.target.c_str(), report_str(s.report).c_str());
      if (!s.report.pass) ++failed;
    }
    if (failed)
      throw NumericError("gradcheck: " + std::to_string(failed) + " target(s) failed");
    return 0;
  }

  if (sweep_cmd->parsed()) {
    sweep_args.cfg.norm = NormKind::mode;
    const SweepResult res = run_sweep(sweep_args.cfg, sweep_batches, sweep_modes, sweep_seeds);
    if (!res.csv_path.empty()) std::printf("wrote %s\n", res.csv_path.c_str());
    for (const std::string& row : res.csv_rows) {
      if (row.rfind("median,", 0) == 0) std::printf("%s\n", row.c_str());
    }
    return 0;
  }

  if (gates_cmd->parsed()) {
    const Checkpoint ckpt = checkpoint_load(gates_ckpt);
    RunConfig data_cfg = config_from_checkpoint(ckpt);
    Model model = model_from_checkpoint(ckpt);
    if (!gates_data.empty()) data_cfg.data = gates_data;
    if (!gates_data_dir.empty()) data_cfg.data_dir = gates_data_dir;
    auto [train_ds, test_ds] = load_data(data_cfg);
    (void)train_ds;
    const auto reports = gates_report(model, test_ds, data_cfg.batch_size, gates_top);
    for (const GateLayerReport& rep : reports) {
      if (rep.has_purity)
        std::printf("%s purity=%s\n", rep.layer.c_str(), fmt_double(rep.purity).c_str());
      else
        std::printf("%s\n", rep.layer.c_str());
      for (const GateModeReport& m : rep.per_mode) {
        std::string tops;
        for (std::size_t i = 0; i < m.top_indices.size(); ++i) {
          if (i) tops += ' ';
          tops += std::to_string(m.top_indices[i]);
        }
        std::printf("  mode %zu usage=%s top: %s\n", m.mode, fmt_double(m.usage).c_str(),
                    tops.c_str());
      }
    }
    return 0;
  }

  if (synth_cmd->parsed()) {
    auto [train_ds, test_ds] = synth_generate(synth_cfg);

    Checkpoint bundle;
    auto add_split = [&](const std::string& prefix, const Dataset& ds) {
      bundle.add(prefix + "_features", ds.features);
      Tensor labels({ds.labels.size()});
      for (std::size_t i = 0; i < ds.labels.size(); ++i)
        labels[i] = static_cast<double>(ds.labels[i]);
      bundle.add(prefix + "_labels", labels);
      Tensor modes({ds.mode_labels.size()});
      for (std::size_t i = 0; i < ds.mode_labels.size(); ++i)
        modes[i] = static_cast<double>(ds.mode_labels[i]);
      bundle.add(prefix + "_modes", modes);
    };
    add_split("train", train_ds);
    add_split("test", test_ds);
    bundle.set_config("kind", "synth-bundle");
    bundle.set_config("modes", std::to_string(synth_cfg.modes));
    bundle.set_config("classes", std::to_string(synth_cfg.classes));
    bundle.set_config("separation", fmt_double(synth_cfg.separation));
    bundle.set_config("scale_ratio", fmt_double(synth_cfg.scale_ratio));
    bundle.set_config("seed", std::to_string(synth_cfg.seed));
    checkpoint_save(bundle, synth_out);
    std::printf("wrote %s\n", synth_out.c_str());

    auto summarize = [&](const char* name, const Dataset& ds) {
      const std::size_t n = ds.features.shape()[0];
      const std::size_t per = ds.features.size() / n;
      for (std::size_t m = 0; m < synth_cfg.modes; ++m) {
        std::size_t count = 0;
        double sum = 0.0, sumsq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (ds.mode_labels[i] != static_cast<int>(m)) continue;
          ++count;
          for (std::size_t e = 0; e < per; ++e) {
            const double v = ds.features[i * per + e];
            sum += v;
            sumsq += v * v;
          }
        }
        const double denom = static_cast<double>(count * per);
        const double mean = count ? sum / denom : 0.0;
        const double var = count ? sumsq / denom - mean * mean : 0.0;
        std::printf("%s mode %zu: %zu samples, feature mean=%.6f std=%.6f\n", name, m, count,
                    mean, var > 0 ? std::sqrt(var) : 0.0);
      }
    };
    summarize("train", train_ds);
    summarize("test", test_ds);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const modenorm::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
