#include "modenorm/run.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>

#include "modenorm/errors.hpp"
#include "modenorm/kernels.hpp"

namespace modenorm {
namespace {

constexpr std::size_t kHiddenWidth = 32;
// Hidden vectors are normalized as kNormChannels x kNormSpatial x kNormSpatial
// maps; kHiddenWidth must equal kNormChannels * kNormSpatial^2.
constexpr std::size_t kNormChannels = 8;
constexpr std::size_t kNormSpatial = 2;

// Substream tags off the run seed; adding a stream means adding a tag here,
// never reordering existing ones.
enum StreamTag : std::uint64_t { kDataStream = 0, kInitStream = 1, kPerturbStream = 2, kShuffleStream = 3 };

double dot_all(const Tensor& a, const Tensor& b) {
  return kernels::dot(a.data(), b.data(), a.size());
}

std::size_t count_errors(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t n = labels.size();
  const std::size_t y = logits.size() / n;
  std::size_t errors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data() + i * y;
    std::size_t best = 0;
    for (std::size_t j = 1; j < y; ++j)
      if (row[j] > row[best]) best = j;
    if (best != static_cast<std::size_t>(labels[i])) ++errors;
  }
  return errors;
}

// Mean gate mass per mode from the last forward, accumulated across gated
// layers: each layer contributes one mass row per sample, so `div` counts
// layer-samples and the final usage still sums to one.
void add_gate_usage(Model& model, std::vector<double>& acc, double& div) {
  for (NormLayerAdapter* adapter : model.norm_layers()) {
    if (!adapter->norm.gated()) continue;
    const NormLayer::Cache& cache = adapter->norm.cache();
    const Tensor& g = cache.gates;
    const std::size_t k = adapter->norm.config().modes;
    if (acc.empty()) acc.assign(k, 0.0);
    if (adapter->norm.config().kind == NormKind::mode) {
      const std::size_t n = g.size() / k;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) acc[j] += g[i * k + j];
      div += static_cast<double>(n);
    } else {
      const std::size_t n = g.shape()[0], c = g.shape()[1];
      const double cinv = 1.0 / static_cast<double>(c);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t j = 0; j < k; ++j) acc[j] += g[(i * c + ch) * k + j] * cinv;
      div += static_cast<double>(n);
    }
  }
}

std::string join_csv(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  return out;
}

std::string metrics_row(int epoch, const std::string& split, const EpochMetrics& m,
                        std::size_t gate_columns) {
  std::vector<std::string> cells{std::to_string(epoch), split, fmt_double(m.loss),
                                 fmt_double(m.error_rate)};
  for (std::size_t k = 0; k < gate_columns; ++k)
    cells.push_back(k < m.gate_usage.size() ? fmt_double(m.gate_usage[k])
                                            : fmt_double(std::nan("")));
  return join_csv(cells);
}

void write_lines(const std::string& path, const std::vector<std::string>& rows) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  for (const std::string& row : rows) f << row << '\n';
  if (!f) throw std::runtime_error("write failed: " + path);
}

void validate_config(const RunConfig& cfg) {
  if (cfg.epochs <= 0) throw std::invalid_argument("run: epochs must be positive");
  if (cfg.batch_size == 0) throw std::invalid_argument("run: batch size must be nonzero");
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("run: learning rate must be positive");
  if (cfg.data != "synth" && cfg.data != "idx")
    throw std::invalid_argument("run: data source must be synth or idx");
  if (cfg.data == "idx" && cfg.data_dir.empty())
    throw std::invalid_argument("run: idx data needs --data-dir");
  for (int m : cfg.milestones)
    if (m < 0) throw std::invalid_argument("run: milestones must be nonnegative");
}

// ---- config echo (must be the exact inverse of parse_config below) ----

std::string join_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::string join_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += fmt_double(v[i]);
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = s.find(',', start);
    out.push_back(s.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

const std::string& require_key(const Checkpoint& ckpt, const std::string& key) {
  const std::string* v = ckpt.config_value(key);
  if (!v) throw std::runtime_error("checkpoint: missing config key " + key);
  return *v;
}

double parse_double(const std::string& s) { return std::strtod(s.c_str(), nullptr); }
int parse_int(const std::string& s) { return static_cast<int>(std::strtol(s.c_str(), nullptr, 10)); }
std::uint64_t parse_u64(const std::string& s) { return std::strtoull(s.c_str(), nullptr, 10); }
std::size_t parse_size(const std::string& s) { return static_cast<std::size_t>(parse_u64(s)); }

void echo_config(Checkpoint& ckpt, const RunConfig& cfg, const Shape& input_shape,
                 std::size_t classes) {
  ckpt.set_config("norm", norm_kind_name(cfg.norm));
  ckpt.set_config("modes", std::to_string(cfg.modes));
  ckpt.set_config("groups", std::to_string(cfg.groups));
  ckpt.set_config("batch_size", std::to_string(cfg.batch_size));
  ckpt.set_config("epochs", std::to_string(cfg.epochs));
  ckpt.set_config("lr", fmt_double(cfg.lr));
  ckpt.set_config("momentum", fmt_double(cfg.momentum));
  ckpt.set_config("weight_decay", fmt_double(cfg.weight_decay));
  ckpt.set_config("lambda", fmt_double(cfg.lambda));
  ckpt.set_config("eps", fmt_double(cfg.eps));
  ckpt.set_config("seed", std::to_string(cfg.seed));
  ckpt.set_config("data", cfg.data);
  ckpt.set_config("data_dir", cfg.data_dir);
  ckpt.set_config("milestones", join_list(cfg.milestones));
  ckpt.set_config("out_dir", cfg.out_dir);
  ckpt.set_config("synth_modes", std::to_string(cfg.synth.modes));
  ckpt.set_config("synth_classes", std::to_string(cfg.synth.classes));
  ckpt.set_config("synth_train_samples", std::to_string(cfg.synth.train_samples));
  ckpt.set_config("synth_test_samples", std::to_string(cfg.synth.test_samples));
  ckpt.set_config("synth_channels", std::to_string(cfg.synth.channels));
  ckpt.set_config("synth_height", std::to_string(cfg.synth.height));
  ckpt.set_config("synth_width", std::to_string(cfg.synth.width));
  ckpt.set_config("synth_separation", fmt_double(cfg.synth.separation));
  ckpt.set_config("synth_scale_ratio", fmt_double(cfg.synth.scale_ratio));
  ckpt.set_config("synth_template_scale", fmt_double(cfg.synth.template_scale));
  ckpt.set_config("synth_noise", fmt_double(cfg.synth.noise));
  ckpt.set_config("synth_mixture", join_list(cfg.synth.mixture));
  ckpt.set_config("input_channels", std::to_string(input_shape[1]));
  ckpt.set_config("input_height", std::to_string(input_shape[2]));
  ckpt.set_config("input_width", std::to_string(input_shape[3]));
  ckpt.set_config("classes", std::to_string(classes));
}

// ---- gradcheck harnesses ----

struct NormTrialDims {
  std::size_t n = 4, c = 6, h = 2, w = 3;
};

GradReport norm_trial(NormKind kind, Rng rng, double rtol, double atol) {
  const NormTrialDims d;
  NormConfig ncfg;
  ncfg.kind = kind;
  ncfg.channels = d.c;
  ncfg.modes = (kind == NormKind::mode || kind == NormKind::mode_group) ? 3 : 1;
  ncfg.groups = (kind == NormKind::group) ? 3 : 1;
  NormLayer base(ncfg);
  for (std::size_t c = 0; c < d.c; ++c) {
    base.affine.alpha[c] = 1.0 + 0.5 * rng.next_normal();
    base.affine.beta[c] = 0.3 * rng.next_normal();
  }
  // Off the zero-init symmetric point so every gating path carries signal.
  if (kind == NormKind::mode) {
    for (std::size_t i = 0; i < base.gate.weight.size(); ++i)
      base.gate.weight[i] = 0.3 * rng.next_normal();
    for (std::size_t i = 0; i < base.gate.bias.size(); ++i)
      base.gate.bias[i] = 0.1 * rng.next_normal();
  }
  if (kind == NormKind::mode_group) {
    for (std::size_t i = 0; i < base.cgate.weight.size(); ++i)
      base.cgate.weight[i] = 0.3 * rng.next_normal();
    for (std::size_t i = 0; i < base.cgate.bias.size(); ++i)
      base.cgate.bias[i] = 0.1 * rng.next_normal();
  }

  const Tensor x = Tensor::randn({d.n, d.c, d.h, d.w}, rng);
  const Tensor w = Tensor::randn({d.n, d.c, d.h, d.w}, rng);

  NormLayer worked = base;
  worked.forward(x);
  const Tensor dx = worked.backward(w);

  auto loss_x = [&](const Tensor& xx) {
    NormLayer copy = base;
    return dot_all(w, copy.forward(xx));
  };
  GradReport rep = check(dx, numeric_grad(loss_x, x), rtol, atol);

  auto check_param = [&](const Tensor& analytic, const Tensor& value,
                         const std::function<void(NormLayer&, const Tensor&)>& set) {
    auto f = [&](const Tensor& v) {
      NormLayer copy = base;
      set(copy, v);
      return dot_all(w, copy.forward(x));
    };
    rep = merge(rep, check(analytic, numeric_grad(f, value), rtol, atol));
  };

  check_param(worked.alpha_grad, base.affine.alpha,
              [](NormLayer& l, const Tensor& v) { l.affine.alpha = v; });
  check_param(worked.beta_grad, base.affine.beta,
              [](NormLayer& l, const Tensor& v) { l.affine.beta = v; });
  if (kind == NormKind::mode) {
    check_param(worked.gate_weight_grad, base.gate.weight,
                [](NormLayer& l, const Tensor& v) { l.gate.weight = v; });
    check_param(worked.gate_bias_grad, base.gate.bias,
                [](NormLayer& l, const Tensor& v) { l.gate.bias = v; });
  }
  if (kind == NormKind::mode_group) {
    check_param(worked.cgate_weight_grad, base.cgate.weight,
                [](NormLayer& l, const Tensor& v) { l.cgate.weight = v; });
    check_param(worked.cgate_bias_grad, base.cgate.bias,
                [](NormLayer& l, const Tensor& v) { l.cgate.bias = v; });
  }
  return rep;
}

GradReport dense_trial(Rng rng, double rtol, double atol) {
  const std::size_t n = 3, in = 5, out = 4;
  DenseLayer base(in, out, rng);
  const Tensor x = Tensor::randn({n, in}, rng);
  const Tensor w = Tensor::randn({n, out, 1, 1}, rng);

  DenseLayer worked = base;
  worked.forward(x);
  const Tensor dx = worked.backward(w);

  auto loss_x = [&](const Tensor& xx) {
    DenseLayer copy = base;
    return dot_all(w, copy.forward(xx));
  };
  GradReport rep = check(dx, numeric_grad(loss_x, x), rtol, atol);

  auto loss_weight = [&](const Tensor& v) {
    DenseLayer copy = base;
    copy.weight = v;
    return dot_all(w, copy.forward(x));
  };
  rep = merge(rep, check(worked.weight_grad, numeric_grad(loss_weight, base.weight), rtol, atol));

  auto loss_bias = [&](const Tensor& v) {
    DenseLayer copy = base;
    copy.bias = v;
    return dot_all(w, copy.forward(x));
  };
  rep = merge(rep, check(worked.bias_grad, numeric_grad(loss_bias, base.bias), rtol, atol));
  return rep;
}

GradReport xent_trial(Rng rng, double rtol, double atol) {
  const std::size_t n = 4, y = 5;
  const Tensor logits = Tensor::randn({n, y}, rng);
  std::vector<int> labels(n);
  for (int& l : labels) l = static_cast<int>(rng.next_below(y));

  const Tensor analytic = softmax_xent(logits, labels).second;
  auto f = [&](const Tensor& v) { return softmax_xent(v, labels).first; };
  return check(analytic, numeric_grad(f, logits), rtol, atol);
}

double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return (n % 2) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

NormKind parse_norm_kind(const std::string& name) {
  if (name == "bn") return NormKind::batch;
  if (name == "in") return NormKind::instance;
  if (name == "ln") return NormKind::layer;
  if (name == "gn") return NormKind::group;
  if (name == "mn") return NormKind::mode;
  if (name == "mgn") return NormKind::mode_group;
  throw std::invalid_argument("unknown norm kind: " + name +
                              " (expected bn, in, ln, gn, mn, mgn)");
}

std::string norm_kind_name(NormKind kind) {
  switch (kind) {
    case NormKind::batch: return "bn";
    case NormKind::instance: return "in";
    case NormKind::layer: return "ln";
    case NormKind::group: return "gn";
    case NormKind::mode: return "mn";
    case NormKind::mode_group: return "mgn";
  }
  throw std::invalid_argument("unknown norm kind enum value");
}

std::pair<Dataset, Dataset> load_data(const RunConfig& cfg) {
  if (cfg.data == "synth") {
    SynthConfig scfg = cfg.synth;
    scfg.seed = Rng(cfg.seed).split(kDataStream).seed();
    return synth_generate(scfg);
  }
  if (cfg.data == "idx")
    return {idx_load_split(cfg.data_dir, "train"), idx_load_split(cfg.data_dir, "t10k")};
  throw std::invalid_argument("run: data source must be synth or idx");
}

Model build_model(const RunConfig& cfg, const Shape& input_shape, std::size_t classes) {
  if (input_shape.size() != 4)
    throw std::invalid_argument("model: input shape must be rank 4, got " +
                                shape_str(input_shape));
  if (classes < 2) throw std::invalid_argument("model: need at least 2 classes");
  const std::size_t chw = input_shape[1] * input_shape[2] * input_shape[3];

  NormConfig ncfg;
  ncfg.kind = cfg.norm;
  ncfg.channels = kNormChannels;
  const bool gated = cfg.norm == NormKind::mode || cfg.norm == NormKind::mode_group;
  ncfg.modes = gated ? cfg.modes : 1;
  ncfg.groups = (cfg.norm == NormKind::group) ? cfg.groups : 1;
  ncfg.lambda = cfg.lambda;
  ncfg.eps = cfg.eps;

  Rng init = Rng(cfg.seed).split(kInitStream);
  Model model;
  model.add(std::make_unique<DenseLayer>(chw, kHiddenWidth, init));
  model.add(std::make_unique<NormLayerAdapter>(ncfg, kNormSpatial, kNormSpatial));
  model.add(std::make_unique<ReluLayer>());
  model.add(std::make_unique<DenseLayer>(kHiddenWidth, kHiddenWidth, init));
  model.add(std::make_unique<NormLayerAdapter>(ncfg, kNormSpatial, kNormSpatial));
  model.add(std::make_unique<ReluLayer>());
  // Zero-init head: logits start at zero, so early gradients follow the label
  // structure instead of rewarding whatever shrinks randomly initialized logits.
  auto head = std::make_unique<DenseLayer>(kHiddenWidth, classes, init);
  for (std::size_t i = 0; i < head->weight.size(); ++i) head->weight[i] = 0.0;
  model.add(std::move(head));

  if (gated && cfg.modes >= 2) {
    Rng perturb = Rng(cfg.seed).split(kPerturbStream);
    for (NormLayerAdapter* adapter : model.norm_layers()) {
      Tensor& gw = (cfg.norm == NormKind::mode) ? adapter->norm.gate.weight
                                                : adapter->norm.cgate.weight;
      for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += 1e-3 * perturb.next_normal();
    }
  }
  return model;
}

EpochMetrics evaluate(Model& model, const Dataset& ds, std::size_t batch_size) {
  const Phase prev = model.phase();
  model.set_phase(Phase::eval);
  Rng unused(0);
  double loss_acc = 0.0, gate_div = 0.0;
  std::size_t errors = 0, total = 0;
  std::vector<double> gate_acc;
  for (const Batch& b : make_batches(ds, batch_size, unused, false)) {
    const Tensor logits = model.forward(b.features);
    loss_acc += softmax_xent(logits, b.labels).first * static_cast<double>(b.labels.size());
    errors += count_errors(logits, b.labels);
    total += b.labels.size();
    add_gate_usage(model, gate_acc, gate_div);
  }
  model.set_phase(prev);

  EpochMetrics m;
  m.loss = loss_acc / static_cast<double>(total);
  m.error_rate = static_cast<double>(errors) / static_cast<double>(total);
  if (gate_div > 0.0) {
    for (double& v : gate_acc) v /= gate_div;
    m.gate_usage = std::move(gate_acc);
  }
  return m;
}

TrainResult run_train(const RunConfig& cfg) {
  validate_config(cfg);
  auto [train, test] = load_data(cfg);
  Model model = build_model(cfg, train.features.shape(), train.classes);
  SgdOptimizer opt(model.params(), SgdConfig{cfg.momentum, cfg.weight_decay});
  const std::vector<int> milestones =
      cfg.milestones.empty() ? default_milestones(cfg.epochs) : cfg.milestones;
  Rng shuffle = Rng(cfg.seed).split(kShuffleStream);

  const bool gated = cfg.norm == NormKind::mode || cfg.norm == NormKind::mode_group;
  const std::size_t gate_columns = gated ? cfg.modes : 0;

  TrainResult res;
  res.csv_rows.push_back("# modenorm metrics v1");
  std::string header = "epoch,split,loss,error_rate";
  for (std::size_t k = 1; k <= gate_columns; ++k) header += ",gate_usage_" + std::to_string(k);
  res.csv_rows.push_back(header);

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    res.metrics_path = cfg.out_dir + "/metrics.csv";
    res.checkpoint_path = cfg.out_dir + "/model.mncp";
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(cfg.lr, milestones, epoch);
    model.set_phase(Phase::train);
    double loss_acc = 0.0, gate_div = 0.0;
    std::size_t errors = 0, total = 0;
    std::vector<double> gate_acc;
    for (const Batch& b : make_batches(train, cfg.batch_size, shuffle, true)) {
      const Tensor logits = model.forward(b.features);
      auto [loss, dlogits] = softmax_xent(logits, b.labels);
      if (!std::isfinite(loss)) {
        EpochMetrics bad;
        bad.loss = loss;
        bad.error_rate = std::nan("");
        res.csv_rows.push_back(metrics_row(epoch, "train", bad, gate_columns));
        if (!res.metrics_path.empty()) write_lines(res.metrics_path, res.csv_rows);
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss_acc += loss * static_cast<double>(b.labels.size());
      errors += count_errors(logits, b.labels);
      total += b.labels.size();
      add_gate_usage(model, gate_acc, gate_div);
      model.backward(dlogits);
      opt.step(lr);
    }
    EpochMetrics tm;
    tm.loss = loss_acc / static_cast<double>(total);
    tm.error_rate = static_cast<double>(errors) / static_cast<double>(total);
    if (gate_div > 0.0) {
      tm.gate_usage = gate_acc;
      for (double& v : tm.gate_usage) v /= gate_div;
    }
    res.csv_rows.push_back(metrics_row(epoch, "train", tm, gate_columns));
    res.final_train = tm;

    const EpochMetrics em = evaluate(model, test, cfg.batch_size);
    res.csv_rows.push_back(metrics_row(epoch, "test", em, gate_columns));
    res.final_test = em;
  }

  if (!res.metrics_path.empty()) {
    write_lines(res.metrics_path, res.csv_rows);
    checkpoint_save(model_to_checkpoint(model, cfg, train.features.shape(), train.classes),
                    res.checkpoint_path);
  }
  res.model = std::move(model);
  return res;
}

Checkpoint model_to_checkpoint(Model& model, const RunConfig& cfg, const Shape& input_shape,
                               std::size_t classes) {
  Checkpoint ckpt;
  for (const ParamRef& ref : model.state()) ckpt.add(ref.name, *ref.value);
  echo_config(ckpt, cfg, input_shape, classes);
  return ckpt;
}

RunConfig config_from_checkpoint(const Checkpoint& ckpt) {
  RunConfig cfg;
  cfg.norm = parse_norm_kind(require_key(ckpt, "norm"));
  cfg.modes = parse_size(require_key(ckpt, "modes"));
  cfg.groups = parse_size(require_key(ckpt, "groups"));
  cfg.batch_size = parse_size(require_key(ckpt, "batch_size"));
  cfg.epochs = parse_int(require_key(ckpt, "epochs"));
  cfg.lr = parse_double(require_key(ckpt, "lr"));
  cfg.momentum = parse_double(require_key(ckpt, "momentum"));
  cfg.weight_decay = parse_double(require_key(ckpt, "weight_decay"));
  cfg.lambda = parse_double(require_key(ckpt, "lambda"));
  cfg.eps = parse_double(require_key(ckpt, "eps"));
  cfg.seed = parse_u64(require_key(ckpt, "seed"));
  cfg.data = require_key(ckpt, "data");
  cfg.data_dir = require_key(ckpt, "data_dir");
  cfg.milestones.clear();
  for (const std::string& s : split_list(require_key(ckpt, "milestones")))
    cfg.milestones.push_back(parse_int(s));
  cfg.out_dir = require_key(ckpt, "out_dir");
  cfg.synth.modes = parse_size(require_key(ckpt, "synth_modes"));
  cfg.synth.classes = parse_size(require_key(ckpt, "synth_classes"));
  cfg.synth.train_samples = parse_size(require_key(ckpt, "synth_train_samples"));
  cfg.synth.test_samples = parse_size(require_key(ckpt, "synth_test_samples"));
  cfg.synth.channels = parse_size(require_key(ckpt, "synth_channels"));
  cfg.synth.height = parse_size(require_key(ckpt, "synth_height"));
  cfg.synth.width = parse_size(require_key(ckpt, "synth_width"));
  cfg.synth.separation = parse_double(require_key(ckpt, "synth_separation"));
  cfg.synth.scale_ratio = parse_double(require_key(ckpt, "synth_scale_ratio"));
  cfg.synth.template_scale = parse_double(require_key(ckpt, "synth_template_scale"));
  cfg.synth.noise = parse_double(require_key(ckpt, "synth_noise"));
  cfg.synth.mixture.clear();
  for (const std::string& s : split_list(require_key(ckpt, "synth_mixture")))
    cfg.synth.mixture.push_back(parse_double(s));
  return cfg;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  const RunConfig cfg = config_from_checkpoint(ckpt);
  const Shape input_shape{1, parse_size(require_key(ckpt, "input_channels")),
                          parse_size(require_key(ckpt, "input_height")),
                          parse_size(require_key(ckpt, "input_width"))};
  const std::size_t classes = parse_size(require_key(ckpt, "classes"));

  Model model = build_model(cfg, input_shape, classes);
  std::vector<ParamRef> refs = model.state();
  if (refs.size() != ckpt.tensors.size())
    throw std::runtime_error("checkpoint: expected " + std::to_string(refs.size()) +
                             " tensors, file has " + std::to_string(ckpt.tensors.size()));
  for (ParamRef& ref : refs) {
    const Tensor* t = ckpt.find(ref.name);
    if (!t) throw std::runtime_error("checkpoint: missing tensor " + ref.name);
    if (!t->same_shape(*ref.value))
      throw std::runtime_error("checkpoint: shape mismatch for " + ref.name + ": file has " +
                               shape_str(t->shape()) + ", model needs " +
                               shape_str(ref.value->shape()));
    *ref.value = *t;
  }
  for (NormLayerAdapter* adapter : model.norm_layers()) adapter->sync_after_load();
  return model;
}

EvalResult run_eval(const std::string& checkpoint_path, const std::string& data_override,
                    const std::string& data_dir_override) {
  const Checkpoint ckpt = checkpoint_load(checkpoint_path);

  EvalResult res;
  res.cfg = config_from_checkpoint(ckpt);
  res.input_shape = Shape{1, parse_size(require_key(ckpt, "input_channels")),
                          parse_size(require_key(ckpt, "input_height")),
                          parse_size(require_key(ckpt, "input_width"))};
  res.classes = parse_size(require_key(ckpt, "classes"));
  res.model = model_from_checkpoint(ckpt);

  RunConfig data_cfg = res.cfg;
  if (!data_override.empty()) data_cfg.data = data_override;
  if (!data_dir_override.empty()) data_cfg.data_dir = data_dir_override;
  auto [train, test] = load_data(data_cfg);
  (void)train;

  res.metrics = evaluate(res.model, test, res.cfg.batch_size);
  res.line = "split=test loss=" + fmt_double(res.metrics.loss) +
             " error_rate=" + fmt_double(res.metrics.error_rate);
  if (!res.metrics.gate_usage.empty()) {
    res.line += " gate_usage=";
    for (std::size_t k = 0; k < res.metrics.gate_usage.size(); ++k) {
      if (k) res.line += ',';
      res.line += fmt_double(res.metrics.gate_usage[k]);
    }
  }
  return res;
}

std::vector<GradcheckSummary> run_gradcheck(const std::string& target, std::uint64_t seed,
                                            std::size_t trials, double rtol, double atol) {
  if (trials == 0) throw std::invalid_argument("gradcheck: trials must be nonzero");
  struct Entry {
    const char* name;
    std::uint64_t tag;
    std::function<GradReport(Rng, double, double)> fn;
  };
  const std::vector<Entry> entries{
      {"bn", 10, [](Rng r, double rt, double at) { return norm_trial(NormKind::batch, r, rt, at); }},
      {"in", 11, [](Rng r, double rt, double at) { return norm_trial(NormKind::instance, r, rt, at); }},
      {"ln", 12, [](Rng r, double rt, double at) { return norm_trial(NormKind::layer, r, rt, at); }},
      {"gn", 13, [](Rng r, double rt, double at) { return norm_trial(NormKind::group, r, rt, at); }},
      {"mn", 14, [](Rng r, double rt, double at) { return norm_trial(NormKind::mode, r, rt, at); }},
      {"mgn", 15,
       [](Rng r, double rt, double at) { return norm_trial(NormKind::mode_group, r, rt, at); }},
      {"dense", 16, [](Rng r, double rt, double at) { return dense_trial(r, rt, at); }},
      {"xent", 17, [](Rng r, double rt, double at) { return xent_trial(r, rt, at); }},
  };

  std::vector<GradcheckSummary> out;
  bool matched = false;
  for (const Entry& e : entries) {
    if (target != "all" && target != e.name) continue;
    matched = true;
    GradcheckSummary summary;
    summary.target = e.name;
    for (std::size_t t = 0; t < trials; ++t) {
      const Rng trial_rng = Rng(seed).split(e.tag).split(t);
      summary.report = (t == 0) ? e.fn(trial_rng, rtol, atol)
                                : merge(summary.report, e.fn(trial_rng, rtol, atol));
    }
    out.push_back(std::move(summary));
  }
  if (!matched)
    throw std::invalid_argument("gradcheck: unknown target " + target +
                                " (expected all, bn, in, ln, gn, mn, mgn, dense, xent)");
  return out;
}

SweepResult run_sweep(const RunConfig& base, const std::vector<std::size_t>& batch_sizes,
                      const std::vector<std::size_t>& mode_counts, std::size_t num_seeds) {
  if (batch_sizes.empty() || mode_counts.empty() || num_seeds == 0)
    throw std::invalid_argument("sweep: grid must be nonempty");

  SweepResult res;
  res.csv_rows.push_back("# modenorm sweep v1");
  res.csv_rows.push_back("row_type,batch_size,modes,seed,loss,error_rate");

  for (std::size_t n : batch_sizes) {
    for (std::size_t k : mode_counts) {
      std::vector<double> losses, errors;
      for (std::size_t s = 0; s < num_seeds; ++s) {
        RunConfig cfg = base;
        cfg.norm = NormKind::mode;
        cfg.modes = k;
        cfg.batch_size = n;
        cfg.seed = base.seed + s;
        cfg.out_dir.clear();

        SweepCell cell;
        cell.batch_size = n;
        cell.modes = k;
        cell.seed = cfg.seed;
        try {
          const TrainResult r = run_train(cfg);
          cell.loss = r.final_test.loss;
          cell.error_rate = r.final_test.error_rate;
          losses.push_back(cell.loss);
          errors.push_back(cell.error_rate);
        } catch (const std::exception& e) {
          cell.failed = true;
          cell.error = e.what();
          cell.loss = std::nan("");
          cell.error_rate = std::nan("");
          std::fprintf(stderr, "sweep cell batch_size=%zu modes=%zu seed=%llu failed: %s\n", n, k,
                       static_cast<unsigned long long>(cell.seed), e.what());
        }
        res.csv_rows.push_back(join_csv({"cell", std::to_string(n), std::to_string(k),
                                         std::to_string(cell.seed), fmt_double(cell.loss),
                                         fmt_double(cell.error_rate)}));
        res.cells.push_back(std::move(cell));
      }
      res.csv_rows.push_back(join_csv({"median", std::to_string(n), std::to_string(k), "",
                                       fmt_double(median(losses)), fmt_double(median(errors))}));
    }
  }

  if (!base.out_dir.empty()) {
    std::filesystem::create_directories(base.out_dir);
    res.csv_path = base.out_dir + "/sweep.csv";
    write_lines(res.csv_path, res.csv_rows);
  }
  return res;
}

std::vector<GateLayerReport> gates_report(Model& model, const Dataset& ds,
                                          std::size_t batch_size, std::size_t top_p) {
  std::vector<NormLayerAdapter*> gated;
  for (NormLayerAdapter* adapter : model.norm_layers())
    if (adapter->norm.gated()) gated.push_back(adapter);
  if (gated.empty())
    throw std::invalid_argument("gates report: model has no gated normalization layer");

  const std::size_t n = ds.features.shape()[0];
  std::vector<Tensor> mass;
  for (NormLayerAdapter* adapter : gated)
    mass.push_back(Tensor::zeros({n, adapter->norm.config().modes}));

  const Phase prev = model.phase();
  model.set_phase(Phase::eval);
  Rng unused(0);
  for (const Batch& b : make_batches(ds, batch_size, unused, false)) {
    model.forward(b.features);
    for (std::size_t li = 0; li < gated.size(); ++li) {
      const NormLayer::Cache& cache = gated[li]->norm.cache();
      const std::size_t k = gated[li]->norm.config().modes;
      for (std::size_t i = 0; i < b.indices.size(); ++i) {
        double* dst = mass[li].data() + b.indices[i] * k;
        if (gated[li]->norm.config().kind == NormKind::mode) {
          for (std::size_t j = 0; j < k; ++j) dst[j] = cache.gates[i * k + j];
        } else {
          const std::size_t c = cache.gates.shape()[1];
          const double cinv = 1.0 / static_cast<double>(c);
          for (std::size_t j = 0; j < k; ++j) {
            double s = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) s += cache.gates[(i * c + ch) * k + j];
            dst[j] = s * cinv;
          }
        }
      }
    }
  }
  model.set_phase(prev);

  std::vector<GateLayerReport> reports;
  for (std::size_t li = 0; li < gated.size(); ++li) {
    const std::size_t k = gated[li]->norm.config().modes;
    GateLayerReport rep;
    rep.layer = "norm" + std::to_string(li + 1);
    std::vector<int> assignments(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = mass[li].data() + i * k;
      for (std::size_t j = 1; j < k; ++j)
        if (row[j] > row[assignments[i]]) assignments[i] = static_cast<int>(j);
    }
    for (std::size_t j = 0; j < k; ++j) {
      GateModeReport mode_rep;
      mode_rep.mode = j;
      double total_mass = 0.0;
      for (std::size_t i = 0; i < n; ++i) total_mass += mass[li][i * k + j];
      mode_rep.usage = total_mass / static_cast<double>(n);

      std::vector<std::size_t> order(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      const std::size_t keep = std::min(top_p, n);
      std::partial_sort(order.begin(), order.begin() + keep, order.end(),
                        [&](std::size_t a, std::size_t b) {
                          const double ma = mass[li][a * k + j], mb = mass[li][b * k + j];
                          return (ma != mb) ? ma > mb : a < b;
                        });
      mode_rep.top_indices.assign(order.begin(), order.begin() + keep);
      rep.per_mode.push_back(std::move(mode_rep));
    }
    if (!ds.mode_labels.empty()) {
      rep.has_purity = true;
      rep.purity = match_purity(assignments, ds.mode_labels, k);
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

double match_purity(const std::vector<int>& assignments, const std::vector<int>& mode_labels,
                    std::size_t gates_k) {
  if (assignments.empty() || assignments.size() != mode_labels.size())
    throw std::invalid_argument("purity: assignment and label lengths must match");
  if (gates_k == 0) throw std::invalid_argument("purity: need at least one gate");
  int max_mode = 0;
  for (int m : mode_labels) {
    if (m < 0) throw std::invalid_argument("purity: negative mode label");
    max_mode = std::max(max_mode, m);
  }
  const std::size_t modes = static_cast<std::size_t>(max_mode) + 1;

  std::vector<std::vector<double>> table(gates_k, std::vector<double>(modes, 0.0));
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] < 0 || static_cast<std::size_t>(assignments[i]) >= gates_k)
      throw std::invalid_argument("purity: gate assignment out of range");
    table[assignments[i]][mode_labels[i]] += 1.0;
  }

  // Best injective gate -> mode matching; gates may stay unmatched when there
  // are more gates than modes. Exhaustive search, fine for desk-scale K.
  std::vector<bool> used(modes, false);
  std::function<double(std::size_t)> best = [&](std::size_t gate) -> double {
    if (gate == gates_k) return 0.0;
    double best_score = best(gate + 1);  // leave this gate unmatched
    for (std::size_t m = 0; m < modes; ++m) {
      if (used[m]) continue;
      used[m] = true;
      best_score = std::max(best_score, table[gate][m] + best(gate + 1));
      used[m] = false;
    }
    return best_score;
  };
  return best(0) / static_cast<double>(assignments.size());
}

}  // namespace modenorm
