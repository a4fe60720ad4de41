#include "modenorm/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "modenorm/errors.hpp"
#include "modenorm/kernels.hpp"

namespace modenorm {
namespace {

// N x C x H x W -> N x (C*H*W) view of the same buffer.
Tensor flatten_batch(const Tensor& x) {
  if (x.rank() == 2) return x;
  if (x.rank() != 4)
    throw std::invalid_argument("dense: expected rank-2 or rank-4 input, got " +
                                shape_str(x.shape()));
  return x.reshaped({x.shape()[0], x.size() / x.shape()[0]});
}

}  // namespace

DenseLayer::DenseLayer(std::size_t in_features, std::size_t out_features, Rng& rng) {
  if (in_features == 0 || out_features == 0)
    throw std::invalid_argument("dense: feature counts must be nonzero");
  weight = Tensor({out_features, in_features});
  const double bound = std::sqrt(6.0 / static_cast<double>(in_features + out_features));
  for (std::size_t i = 0; i < weight.size(); ++i)
    weight[i] = rng.next_range(-bound, bound);
  bias = Tensor::zeros({out_features});
  weight_grad = Tensor::zeros({out_features, in_features});
  bias_grad = Tensor::zeros({out_features});
}

Tensor DenseLayer::forward(const Tensor& x) {
  input_shape_ = x.shape();
  input_ = flatten_batch(x);
  const std::size_t n = input_.shape()[0], in = in_features(), out = out_features();
  if (input_.shape()[1] != in)
    throw std::invalid_argument("dense: expected " + std::to_string(in) + " features, got " +
                                std::to_string(input_.shape()[1]));
  Tensor y({n, out, 1, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const double* xrow = input_.data() + i * in;
    double* yrow = y.data() + i * out;
    for (std::size_t o = 0; o < out; ++o)
      yrow[o] = kernels::dot(weight.data() + o * in, xrow, in) + bias[o];
  }
  return y;
}

Tensor DenseLayer::backward(const Tensor& upstream) {
  const std::size_t n = input_.shape()[0], in = in_features(), out = out_features();
  if (upstream.size() != n * out)
    throw std::invalid_argument("dense backward: upstream size mismatch");
  weight_grad = Tensor::zeros({out, in});
  bias_grad = Tensor::zeros({out});
  Tensor dx({n, in});
  for (std::size_t i = 0; i < n; ++i) {
    const double* urow = upstream.data() + i * out;
    const double* xrow = input_.data() + i * in;
    double* dxrow = dx.data() + i * in;
    for (std::size_t o = 0; o < out; ++o) {
      kernels::axpy(urow[o], xrow, weight_grad.data() + o * in, in);
      kernels::axpy(urow[o], weight.data() + o * in, dxrow, in);
      bias_grad[o] += urow[o];
    }
  }
  return dx.reshaped(input_shape_);
}

void DenseLayer::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight, &weight_grad});
  out.push_back({prefix + ".bias", &bias, &bias_grad});
}

Tensor ReluLayer::forward(const Tensor& x) {
  input_ = x;
  Tensor y(x.shape());
  kernels::relu(x.data(), y.data(), x.size());
  return y;
}

Tensor ReluLayer::backward(const Tensor& upstream) {
  if (!upstream.same_shape(input_))
    throw std::invalid_argument("relu backward: upstream shape mismatch");
  Tensor dx(input_.shape());
  kernels::relu_mask(input_.data(), upstream.data(), dx.data(), dx.size());
  return dx;
}

void NormLayerAdapter::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".alpha", &norm.affine.alpha, &norm.alpha_grad});
  out.push_back({prefix + ".beta", &norm.affine.beta, &norm.beta_grad});
  if (norm.config().kind == NormKind::mode) {
    out.push_back({prefix + ".gate_weight", &norm.gate.weight, &norm.gate_weight_grad});
    out.push_back({prefix + ".gate_bias", &norm.gate.bias, &norm.gate_bias_grad});
  }
  if (norm.config().kind == NormKind::mode_group) {
    out.push_back({prefix + ".gate_weight", &norm.cgate.weight, &norm.cgate_weight_grad});
    out.push_back({prefix + ".gate_bias", &norm.cgate.bias, &norm.cgate_bias_grad});
  }
}

void NormLayerAdapter::collect_state(const std::string& prefix, std::vector<ParamRef>& out) {
  if (!norm.tracks_running()) return;
  out.push_back({prefix + ".run_m1", &norm.stats.run_m1, nullptr});
  out.push_back({prefix + ".run_m2", &norm.stats.run_m2, nullptr});
  init_flag_ = Tensor::full({1}, norm.stats.initialized ? 1.0 : 0.0);
  out.push_back({prefix + ".stats_init", &init_flag_, nullptr});
}

Model::Model(const Model& other) : phase_(other.phase_) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    layers_.clear();
    layers_.reserve(other.layers_.size());
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
    phase_ = other.phase_;
  }
  return *this;
}

Tensor Model::forward(const Tensor& x) {
  Tensor cur = x;
  for (auto& layer : layers_) cur = layer->forward(cur);
  return cur;
}

Tensor Model::backward(const Tensor& dlogits) {
  Tensor cur = dlogits;
  for (std::size_t i = layers_.size(); i-- > 0;) cur = layers_[i]->backward(cur);
  return cur;
}

void Model::set_phase(Phase p) {
  phase_ = p;
  for (auto& layer : layers_) layer->set_phase(p);
}

std::vector<ParamRef> Model::params() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i]->collect_params("layers." + std::to_string(i), out);
  return out;
}

std::vector<ParamRef> Model::state() {
  std::vector<ParamRef> out = params();
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (auto* adapter = dynamic_cast<NormLayerAdapter*>(layers_[i].get()))
      adapter->collect_state("layers." + std::to_string(i), out);
  }
  return out;
}

std::vector<NormLayerAdapter*> Model::norm_layers() {
  std::vector<NormLayerAdapter*> out;
  for (auto& layer : layers_) {
    if (auto* adapter = dynamic_cast<NormLayerAdapter*>(layer.get())) out.push_back(adapter);
  }
  return out;
}

std::pair<double, Tensor> softmax_xent(const Tensor& logits, const std::vector<int>& labels) {
  Tensor flat = logits;
  if (logits.rank() == 4) {
    if (logits.shape()[2] != 1 || logits.shape()[3] != 1)
      throw std::invalid_argument("softmax_xent: spatial logits not supported");
    flat = logits.reshaped({logits.shape()[0], logits.shape()[1]});
  } else if (logits.rank() != 2) {
    throw std::invalid_argument("softmax_xent: expected rank-2 logits");
  }
  const std::size_t n = flat.shape()[0], y = flat.shape()[1];
  if (labels.size() != n)
    throw std::invalid_argument("softmax_xent: batch has " + std::to_string(n) + " rows but " +
                                std::to_string(labels.size()) + " labels");

  Tensor dlogits(flat.shape());
  double loss = 0.0;
  const double ninv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= y)
      throw std::invalid_argument("softmax_xent: label " + std::to_string(label) +
                                  " out of range for " + std::to_string(y) + " classes");
    const double* row = flat.data() + i * y;
    double m = row[0];
    for (std::size_t j = 1; j < y; ++j) m = std::max(m, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < y; ++j) denom += std::exp(row[j] - m);
    const double log_denom = std::log(denom);
    loss += (log_denom - (row[label] - m)) * ninv;
    double* drow = dlogits.data() + i * y;
    for (std::size_t j = 0; j < y; ++j) {
      const double p = std::exp(row[j] - m) / denom;
      drow[j] = (p - (static_cast<std::size_t>(label) == j ? 1.0 : 0.0)) * ninv;
    }
  }
  if (logits.rank() == 4) dlogits = dlogits.reshaped(logits.shape());
  return {loss, dlogits};
}

SgdOptimizer::SgdOptimizer(std::vector<ParamRef> params, const SgdConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
  velocity_.reserve(params_.size());
  for (const ParamRef& p : params_) velocity_.push_back(Tensor::zeros(p.value->shape()));
}

void SgdOptimizer::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor& g = *params_[i].grad;
    if (!all_finite(g))
      throw NumericError("sgd: non-finite gradient in " + params_[i].name);
    Tensor& v = velocity_[i];
    Tensor& p = *params_[i].value;
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = cfg_.momentum * v[j] + (g[j] + cfg_.weight_decay * p[j]);
      p[j] -= lr * v[j];
    }
  }
}

double lr_at(double lr0, const std::vector<int>& milestones, int epoch) {
  double lr = lr0;
  for (int m : milestones) {
    if (epoch >= m) lr *= 0.1;
  }
  return lr;
}

std::vector<int> default_milestones(int epochs) {
  std::vector<int> out;
  const int a = static_cast<int>(0.65 * epochs);
  const int b = static_cast<int>(0.80 * epochs);
  if (a > 0) out.push_back(a);
  if (b > a) out.push_back(b);
  return out;
}

}  // namespace modenorm
