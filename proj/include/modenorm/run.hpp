#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "modenorm/checkpoint.hpp"
#include "modenorm/data.hpp"
#include "modenorm/gradcheck.hpp"
#include "modenorm/nn.hpp"

namespace modenorm {

// One training or evaluation run. The run seed derives every random stream
// (synthetic data, weight init, gating perturbation, epoch shuffles), so a
// config plus seed pins the full trajectory byte for byte.
struct RunConfig {
  NormKind norm = NormKind::batch;
  std::size_t modes = 2;   // K for the mode kinds
  std::size_t groups = 2;  // group kind only
  std::size_t batch_size = 128;
  int epochs = 15;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lambda = 0.1;
  double eps = 1e-5;
  std::uint64_t seed = 0;
  std::string data = "synth";   // "synth" or "idx"
  std::string data_dir;         // idx directory
  std::vector<int> milestones;  // empty: drop lr x0.1 at 65% and 80% of epochs
  std::string out_dir = ".";    // empty: skip writing metrics and checkpoint
  SynthConfig synth;            // synth source; its seed field is overridden
};

NormKind parse_norm_kind(const std::string& name);  // bn in ln gn mn mgn
std::string norm_kind_name(NormKind kind);

// Train or test split as {synth train, synth test} or the two IDX splits.
// Synthetic data draws from a substream of cfg.seed, so different run seeds
// see different datasets while the same seed always regenerates the same one.
std::pair<Dataset, Dataset> load_data(const RunConfig& cfg);

struct EpochMetrics {
  double loss = 0.0;
  double error_rate = 0.0;
  std::vector<double> gate_usage;  // mean gate mass per mode; empty if ungated
};

// flatten -> dense(CHW->32) -> norm -> relu -> dense(32->32) -> norm -> relu
// -> dense(32->classes). Zero-initialized gating is an exact gradient fixed
// point (uniform gates make every mode's statistics and gradients identical),
// so for K >= 2 the gate weights get 1e-3 noise from a dedicated substream.
Model build_model(const RunConfig& cfg, const Shape& input_shape, std::size_t classes);

// Eval-phase pass over the dataset; restores nothing, mutates no statistics.
EpochMetrics evaluate(Model& model, const Dataset& ds, std::size_t batch_size);

struct TrainResult {
  Model model;
  std::vector<std::string> csv_rows;  // metrics file content, one line each
  EpochMetrics final_train, final_test;
  std::string metrics_path, checkpoint_path;  // empty when out_dir is empty
};

TrainResult run_train(const RunConfig& cfg);

// Every parameter and running-stat tensor plus a config echo sufficient to
// rebuild the model without the original data.
Checkpoint model_to_checkpoint(Model& model, const RunConfig& cfg, const Shape& input_shape,
                               std::size_t classes);
RunConfig config_from_checkpoint(const Checkpoint& ckpt);
Model model_from_checkpoint(const Checkpoint& ckpt);

struct EvalResult {
  RunConfig cfg;      // as echoed in the checkpoint, overrides not applied
  Shape input_shape;  // 1 x C x H x W, for re-serializing the checkpoint
  std::size_t classes = 0;
  Model model;
  EpochMetrics metrics;
  std::string line;  // single human-readable metrics line
};

// data_override / data_dir_override replace the echoed data source when
// nonempty. Evaluation runs on the test split and mutates nothing, so
// re-saving the checkpoint afterwards reproduces the input bytes.
EvalResult run_eval(const std::string& checkpoint_path, const std::string& data_override = "",
                    const std::string& data_dir_override = "");

struct GradcheckSummary {
  std::string target;  // bn, in, ln, gn, mn, mgn, dense, xent
  GradReport report;
};

// Finite-difference certification of the analytic gradients over `trials`
// seeded random instances per target. target "all" covers every kind.
std::vector<GradcheckSummary> run_gradcheck(const std::string& target, std::uint64_t seed,
                                            std::size_t trials = 20, double rtol = 1e-5,
                                            double atol = 1e-8);

struct SweepCell {
  std::size_t batch_size = 0;
  std::size_t modes = 0;
  std::uint64_t seed = 0;
  double loss = 0.0;
  double error_rate = 0.0;
  bool failed = false;
  std::string error;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<std::string> csv_rows;
  std::string csv_path;  // empty when base.out_dir is empty
};

// Mode-normalization grid over batch sizes x mode counts x seeds. Cell
// (N, K, s) trains with base config overridden by N, K and seed base.seed+s;
// sharing the seed offsets across cells pairs the draws for the medians. A
// failing cell records nan metrics and the sweep continues.
SweepResult run_sweep(const RunConfig& base, const std::vector<std::size_t>& batch_sizes,
                      const std::vector<std::size_t>& mode_counts, std::size_t num_seeds);

struct GateModeReport {
  std::size_t mode = 0;
  double usage = 0.0;                    // mean gate mass over the dataset
  std::vector<std::size_t> top_indices;  // dataset positions with highest mass
};

struct GateLayerReport {
  std::string layer;
  std::vector<GateModeReport> per_mode;
  bool has_purity = false;
  double purity = 0.0;
};

// Per gated layer: mean usage and top-p samples per mode, plus purity when
// the dataset carries ground-truth mode labels. Throws std::invalid_argument
// if the model has no gated layer.
std::vector<GateLayerReport> gates_report(Model& model, const Dataset& ds,
                                          std::size_t batch_size, std::size_t top_p);

// Accuracy of the best one-to-one matching between gate assignments (argmax
// indices in [0, gates_k)) and ground-truth mode labels.
double match_purity(const std::vector<int>& assignments, const std::vector<int>& mode_labels,
                    std::size_t gates_k);

// Lossless double -> decimal text (%.17g), shared by every CSV writer so
// equal runs emit equal bytes.
std::string fmt_double(double v);

}  // namespace modenorm
