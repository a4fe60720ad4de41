// End-to-end acceptance checks for the mode-normalization library. Each check
// prints one [PASS]/[FAIL] line; the process exits nonzero if any fail.
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "modenorm/checkpoint.hpp"
#include "modenorm/data.hpp"
#include "modenorm/norm.hpp"
#include "modenorm/rng.hpp"
#include "modenorm/run.hpp"
#include "modenorm/tensor.hpp"

using namespace modenorm;

namespace {

int failures = 0;

void report(const char* name, bool pass, const std::string& detail) {
  std::printf("[%s] %s: %s\n", pass ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tensor random_batch(Rng& rng, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  Tensor x = Tensor::randn({n, c, h, w}, rng);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 1.5 * x[i] + 0.25;
  return x;
}

AffineParams random_affine(std::size_t c, Rng& rng) {
  AffineParams a;
  a.alpha = Tensor({c});
  a.beta = Tensor({c});
  for (std::size_t i = 0; i < c; ++i) {
    a.alpha[i] = 0.5 + rng.next_uniform();
    a.beta[i] = rng.next_normal();
  }
  return a;
}

std::vector<unsigned char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) return {};
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(f),
                                    std::istreambuf_iterator<char>());
}

// Shell out to the installed CLI binary and return its exit status.
int run_cli(const std::string& args) {
  const std::string cmd = std::string(MODENORM_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  if (rc == -1) return -1;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void check_equivalence_lattice() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.next_below(8), c = 1 + rng.next_below(4);
    const std::size_t h = 1 + rng.next_below(3), w = 1 + rng.next_below(3);
    const Tensor x = random_batch(rng, n, c, h, w);
    const AffineParams affine = random_affine(c, rng);
    auto fwd = [&](NormKind kind, std::size_t modes, std::size_t groups) {
      NormConfig cfg;
      cfg.kind = kind;
      cfg.channels = c;
      cfg.modes = modes;
      cfg.groups = groups;
      NormLayer layer(cfg);
      layer.affine = affine;
      return layer.forward(x);
    };
    const Tensor bn = fwd(NormKind::batch, 1, 1);
    worst = std::max(worst, max_abs_diff(fwd(NormKind::mode, 1, 1), bn));
    worst = std::max(worst, max_abs_diff(fwd(NormKind::mode, 3, 1), bn));
    worst = std::max(worst, max_abs_diff(fwd(NormKind::group, 1, 1), fwd(NormKind::layer, 1, 1)));
    worst = std::max(worst, max_abs_diff(fwd(NormKind::group, 1, c), fwd(NormKind::instance, 1, 1)));
  }
  const double secs = seconds_since(t0);
  report("equivalence lattice", worst < 1e-10 && secs < 5.0,
         "100 batches, max abs diff " + fmt_double(worst) + ", " + fmt_double(secs) + "s");
}

void check_weighted_moments() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(77);
  double worst_mean = 0.0, worst_m2 = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.next_below(7), c = 1 + rng.next_below(4);
    const std::size_t h = 1 + rng.next_below(3), w = 1 + rng.next_below(3);
    const std::size_t k = 2 + rng.next_below(2);
    const Tensor x = random_batch(rng, n, c, h, w);
    NormConfig cfg;
    cfg.kind = NormKind::mode;
    cfg.channels = c;
    cfg.modes = k;
    NormLayer layer(cfg);
    layer.gate.weight = Tensor::randn({k, c}, rng);
    layer.gate.bias = Tensor::randn({k}, rng);
    layer.forward(x);
    const Tensor& gates = layer.cache().gates;
    const std::size_t hw = h * w;
    for (std::size_t j = 0; j < k; ++j) {
      if (layer.cache().floored[j]) continue;
      double count = 0.0;
      for (std::size_t i = 0; i < n; ++i) count += gates[i * k + j];
      for (std::size_t ch = 0; ch < c; ++ch) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < hw; ++p) {
            const double v = x[(i * c + ch) * hw + p];
            m1 += gates[i * k + j] * v;
            m2 += gates[i * k + j] * v * v;
          }
        m1 /= count * static_cast<double>(hw);
        m2 /= count * static_cast<double>(hw);
        const double var = m2 - m1 * m1;
        const double r = 1.0 / std::sqrt(var + cfg.eps);
        double wmean = 0.0, wm2 = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < hw; ++p) {
            const double z = (x[(i * c + ch) * hw + p] - m1) * r;
            wmean += gates[i * k + j] * z;
            wm2 += gates[i * k + j] * z * z;
          }
        wmean /= count * static_cast<double>(hw);
        wm2 /= count * static_cast<double>(hw);
        worst_mean = std::max(worst_mean, std::abs(wmean));
        worst_m2 = std::max(worst_m2, std::abs(wm2 - var / (var + cfg.eps)));
      }
    }
  }
  const double secs = seconds_since(t0);
  report("weighted moment identities", worst_mean < 1e-8 && worst_m2 < 1e-6 && secs < 5.0,
         "worst weighted mean " + fmt_double(worst_mean) + ", worst second-moment gap " +
             fmt_double(worst_m2) + ", " + fmt_double(secs) + "s");
}

void check_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  bool all_pass = true;
  double worst = 0.0;
  std::string failing;
  for (const GradcheckSummary& s : run_gradcheck("all", 7, 20, 1e-5, 1e-8)) {
    worst = std::max(worst, s.report.max_rel_err);
    if (!s.report.pass) {
      all_pass = false;
      failing += (failing.empty() ? "" : ", ") + s.target;
    }
  }
  const double secs = seconds_since(t0);
  report("gradient certification", all_pass && secs < 120.0,
         std::string("8 targets x 20 trials") +
             (failing.empty() ? "" : ", failing: " + failing) + ", worst rel err " +
             fmt_double(worst) + ", " + fmt_double(secs) + "s");
}

void check_mode_group_phase_identity() {
  Rng rng(4);
  bool identical = true;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_batch(rng, 3 + trial % 4, 4, 2, 2);
    NormConfig cfg;
    cfg.kind = NormKind::mode_group;
    cfg.channels = 4;
    cfg.modes = 2;
    NormLayer layer(cfg);
    layer.cgate.weight = Tensor::randn({2}, rng);
    layer.cgate.bias = Tensor::randn({2}, rng);
    const Tensor train_y = layer.forward(x);
    layer.set_phase(Phase::eval);
    const Tensor eval_y = layer.forward(x);
    identical = identical && (train_y == eval_y);
  }

  // Whole model: an mgn network emits bit-identical logits across phases.
  RunConfig cfg;
  cfg.norm = NormKind::mode_group;
  cfg.modes = 2;
  cfg.synth.train_samples = 128;
  cfg.synth.test_samples = 64;
  cfg.out_dir.clear();
  auto [train, test] = load_data(cfg);
  Model model = build_model(cfg, train.features.shape(), train.classes);
  Rng unused(0);
  const Batch b = make_batches(train, 64, unused, false)[0];
  model.set_phase(Phase::train);
  const Tensor lt = model.forward(b.features);
  model.set_phase(Phase::eval);
  const Tensor le = model.forward(b.features);
  identical = identical && (lt == le);
  report("mode-group phase identity", identical,
         identical ? "20 layer trials + full model bit-identical across phases"
                   : "train and eval outputs differ");
}

void check_full_blend_eval_identity() {
  Rng rng(31);
  const Tensor x = random_batch(rng, 8, 3, 2, 2);
  NormConfig cfg;
  cfg.kind = NormKind::mode;
  cfg.channels = 3;
  cfg.modes = 2;
  cfg.lambda = 1.0;
  NormLayer layer(cfg);
  layer.gate.weight = Tensor::randn({2, 3}, rng);
  const Tensor train_y = layer.forward(x);
  layer.set_phase(Phase::eval);
  const Tensor eval_y = layer.forward(x);
  const double diff = max_abs_diff(train_y, eval_y);

  // Evaluation leaves every stored byte of a trained model untouched.
  const std::string out = "acceptance_eval_out";
  std::filesystem::remove_all(out);
  RunConfig rc;
  rc.norm = NormKind::mode;
  rc.modes = 2;
  rc.epochs = 2;
  rc.batch_size = 64;
  rc.synth.classes = 4;
  rc.synth.train_samples = 256;
  rc.synth.test_samples = 128;
  rc.out_dir = out;
  const TrainResult r = run_train(rc);
  const std::vector<unsigned char> before = slurp(r.checkpoint_path);
  EvalResult ev = run_eval(r.checkpoint_path);
  const Checkpoint again = model_to_checkpoint(ev.model, ev.cfg, ev.input_shape, ev.classes);
  const bool unchanged = checkpoint_serialize(again) == before && !before.empty();
  std::filesystem::remove_all(out);

  report("full-blend eval identity", diff < 1e-12 && unchanged,
         "train vs eval diff " + fmt_double(diff) +
             (unchanged ? ", checkpoint bytes invariant under eval" : ", checkpoint mutated"));
}

void check_benchmark() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> bn_err, mn_err, purity;
  double slowest = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const bool mode_norm : {false, true}) {
      const auto r0 = std::chrono::steady_clock::now();
      RunConfig cfg;
      cfg.norm = mode_norm ? NormKind::mode : NormKind::batch;
      cfg.modes = 2;
      cfg.seed = seed;
      cfg.out_dir.clear();
      TrainResult r = run_train(cfg);
      slowest = std::max(slowest, seconds_since(r0));
      if (mode_norm) {
        mn_err.push_back(r.final_test.error_rate);
        auto [train, test] = load_data(cfg);
        const auto reports = gates_report(r.model, test, cfg.batch_size, 3);
        purity.push_back(reports[0].purity);
      } else {
        bn_err.push_back(r.final_test.error_rate);
      }
    }
  }
  const double med_bn = median_of(bn_err), med_mn = median_of(mn_err);
  const double med_purity = median_of(purity);
  const bool pass = med_mn <= med_bn && med_purity >= 0.9 && slowest < 120.0;
  report("bimodal benchmark", pass,
         "5 seeds x 15 epochs: median test error mode-norm " + fmt_double(med_mn) +
             " vs batch-norm " + fmt_double(med_bn) + ", median gate purity " +
             fmt_double(med_purity) + ", slowest run " + fmt_double(slowest) + "s, total " +
             fmt_double(seconds_since(t0)) + "s");
}

void check_sweep_trend() {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig base;
  base.out_dir.clear();
  const SweepResult sw = run_sweep(base, {32, 128, 512}, {1, 2, 4, 6}, 5);

  bool any_failed = false;
  for (const SweepCell& cell : sw.cells) any_failed = any_failed || cell.failed;

  auto median_at = [&](std::size_t n, std::size_t k) {
    std::vector<double> errs;
    for (const SweepCell& cell : sw.cells)
      if (cell.batch_size == n && cell.modes == k && !cell.failed)
        errs.push_back(cell.error_rate);
    return errs.empty() ? std::nan("") : median_of(errs);
  };
  const double k1 = median_at(512, 1);
  double best_multi = std::nan("");
  for (std::size_t k : {2, 4, 6}) {
    const double m = median_at(512, k);
    if (std::isnan(best_multi) || m < best_multi) best_multi = m;
  }
  const double secs = seconds_since(t0);
  const bool pass = !any_failed && sw.cells.size() == 60 && best_multi <= k1 && secs < 1800.0;
  report("batch-size x mode-count sweep", pass,
         "60 cells, at batch 512 best multi-mode median error " + fmt_double(best_multi) +
             " vs single-mode " + fmt_double(k1) + ", " + fmt_double(secs) + "s");
}

void check_running_estimates() {
  Rng rng(99);
  const std::size_t n = 64, c = 2;
  NormConfig cfg;
  cfg.kind = NormKind::mode;
  cfg.channels = c;
  cfg.modes = 2;
  cfg.lambda = 0.1;
  NormLayer layer(cfg);
  layer.gate.weight[0 * c + 0] = -30.0;  // hard assignment keyed on channel 0
  layer.gate.weight[1 * c + 0] = 30.0;

  const double truth[2][2] = {{-4.0, -1.0}, {4.0, 1.0}};
  for (int step = 0; step < 1000; ++step) {
    Tensor x({n, c, 1, 1});
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t m = i % 2;
      x[i * c + 0] = truth[m][0] + 0.1 * rng.next_normal();
      x[i * c + 1] = truth[m][1] + 0.1 * rng.next_normal();
    }
    layer.forward(x);
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t ch = 0; ch < c; ++ch)
      worst = std::max(worst, std::abs(layer.stats.run_m1[k * c + ch] - truth[k][ch]));
  report("running estimate convergence", worst < 1e-2,
         "1000 stationary batches, worst running-mean deviation " + fmt_double(worst));
}

void check_persistence_and_ingestion() {
  // Checkpoint round trip through the file system.
  RunConfig rc;
  rc.norm = NormKind::mode;
  rc.modes = 2;
  rc.epochs = 1;
  rc.batch_size = 64;
  rc.synth.classes = 4;
  rc.synth.train_samples = 256;
  rc.synth.test_samples = 128;
  rc.out_dir.clear();
  TrainResult r = run_train(rc);
  auto [train, test] = load_data(rc);
  Checkpoint ckpt = model_to_checkpoint(
      r.model, rc, {1, train.features.dim(1), train.features.dim(2), train.features.dim(3)},
      train.classes);
  const std::string p1 = "acceptance_rt1.mncp", p2 = "acceptance_rt2.mncp";
  checkpoint_save(ckpt, p1);
  checkpoint_save(checkpoint_load(p1), p2);
  const bool roundtrip = slurp(p1) == slurp(p2) && !slurp(p1).empty();
  std::remove(p1.c_str());
  std::remove(p2.c_str());

  // Hand-built IDX fixtures parse to the exact expected tensors.
  std::vector<unsigned char> img = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 3};
  for (int i = 0; i < 18; ++i) img.push_back(static_cast<unsigned char>(i * 14));
  std::vector<unsigned char> lab = {0, 0, 8, 1, 0, 0, 0, 2, 5, 1};
  bool idx_exact = true;
  const Tensor ti = idx_parse(img);
  idx_exact = idx_exact && ti.shape() == Shape{2, 1, 3, 3};
  for (std::size_t i = 0; i < 18 && idx_exact; ++i)
    idx_exact = ti[i] == static_cast<double>(i * 14) / 255.0;
  const Tensor tl = idx_parse(lab);
  idx_exact = idx_exact && tl.shape() == Shape{2} && tl[0] == 5.0 && tl[1] == 1.0;

  // A corrupted magic must surface as CLI exit code 1.
  const std::string dir = "acceptance_idx_bad";
  std::filesystem::create_directories(dir);
  std::vector<unsigned char> bad = img;
  bad[0] = 0xAB;
  std::ofstream(dir + "/train-images-idx3-ubyte", std::ios::binary)
      .write(reinterpret_cast<const char*>(bad.data()), static_cast<std::streamsize>(bad.size()));
  std::ofstream(dir + "/train-labels-idx1-ubyte", std::ios::binary)
      .write(reinterpret_cast<const char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
  std::ofstream(dir + "/t10k-images-idx3-ubyte", std::ios::binary)
      .write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  std::ofstream(dir + "/t10k-labels-idx1-ubyte", std::ios::binary)
      .write(reinterpret_cast<const char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
  const int rc_bad = run_cli("train --data idx --data-dir " + dir + " --epochs 1");
  std::filesystem::remove_all(dir);

  report("persistence and ingestion", roundtrip && idx_exact && rc_bad == 1,
         std::string("save/load/save ") + (roundtrip ? "byte-identical" : "differs") +
             ", idx fixtures " + (idx_exact ? "exact" : "wrong") + ", bad magic exit code " +
             std::to_string(rc_bad));
}

void check_cli_determinism() {
  // Same out dir for both runs: the checkpoint's config echo records it, so
  // distinct directories would differ by that one string and nothing else.
  const std::string out = "acceptance_det";
  const std::string cmd =
      "train --norm mn --modes 2 --epochs 5 --seed 3 --batch-size 64 "
      "--synth-train-samples 1024 --synth-test-samples 256 --out " + out;
  std::filesystem::remove_all(out);
  const int rc_a = run_cli(cmd);
  const std::vector<unsigned char> ma = slurp(out + "/metrics.csv");
  const std::vector<unsigned char> ca = slurp(out + "/model.mncp");
  std::filesystem::remove_all(out);
  const int rc_b = run_cli(cmd);
  const std::vector<unsigned char> mb = slurp(out + "/metrics.csv");
  const std::vector<unsigned char> cb = slurp(out + "/model.mncp");
  std::filesystem::remove_all(out);
  const bool pass = rc_a == 0 && rc_b == 0 && !ma.empty() && ma == mb && !ca.empty() && ca == cb;
  report("repeat-run determinism", pass,
         pass ? "metrics and checkpoints byte-identical across reruns"
              : "outputs differ or runs failed (exit " + std::to_string(rc_a) + "/" +
                    std::to_string(rc_b) + ")");
}

}  // namespace

int main() {
  check_equivalence_lattice();
  check_weighted_moments();
  check_gradients();
  check_mode_group_phase_identity();
  check_full_blend_eval_identity();
  check_benchmark();
  check_sweep_trend();
  check_running_estimates();
  check_persistence_and_ingestion();
  check_cli_determinism();
  if (failures) std::printf("%d acceptance check(s) failed\n", failures);
  else std::printf("all acceptance checks passed\n");
  return failures ? 1 : 0;
}
