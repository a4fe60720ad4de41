#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "modenorm/norm.hpp"
#include "modenorm/tensor.hpp"

namespace modenorm {

// Named view of a trainable tensor and its gradient buffer; the optimizer and
// the checkpoint walk these in layer order.
struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;  // nullptr for persisted-but-untrained tensors
};

// Layers exchange N x C x H x W activations; dense layers flatten internally
// and emit N x out x 1 x 1, so norm layers can sit anywhere in the stack.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x) = 0;
  virtual Tensor backward(const Tensor& upstream) = 0;
  virtual void set_phase(Phase) {}
  virtual void collect_params(const std::string& prefix, std::vector<ParamRef>& out) = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
};

class DenseLayer : public Layer {
 public:
  // Uniform +-sqrt(6 / (fan_in + fan_out)) weight init, zero bias.
  DenseLayer(std::size_t in_features, std::size_t out_features, Rng& rng);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& upstream) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<DenseLayer>(*this); }

  std::size_t in_features() const { return weight.shape()[1]; }
  std::size_t out_features() const { return weight.shape()[0]; }

  Tensor weight;  // out x in
  Tensor bias;    // out
  Tensor weight_grad, bias_grad;

 private:
  Tensor input_;  // cached N x in
  Shape input_shape_;
};

class ReluLayer : public Layer {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& upstream) override;
  void collect_params(const std::string&, std::vector<ParamRef>&) override {}
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReluLayer>(*this); }

 private:
  Tensor input_;
};

class NormLayerAdapter : public Layer {
 public:
  // view_h x view_w > 1 treats a flat activation vector as a cfg.channels x
  // view_h x view_w map: statistics then pool over unit groups and the gates
  // read group means, which concentrates per-sample gating features.
  explicit NormLayerAdapter(const NormConfig& cfg, std::size_t view_h = 1,
                            std::size_t view_w = 1)
      : norm(cfg), view_h_(view_h), view_w_(view_w) {}

  Tensor forward(const Tensor& x) override {
    if (view_h_ * view_w_ == 1) return norm.forward(x);
    in_shape_ = x.shape();
    return norm.forward(viewed(x)).reshaped(in_shape_);
  }
  Tensor backward(const Tensor& upstream) override {
    if (view_h_ * view_w_ == 1) return norm.backward(upstream);
    return norm.backward(viewed(upstream)).reshaped(in_shape_);
  }
  void set_phase(Phase p) override { norm.set_phase(p); }
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  // Running moments and the init flag, for checkpointing.
  void collect_state(const std::string& prefix, std::vector<ParamRef>& out);
  // Propagate a loaded init flag back into the layer state.
  void sync_after_load() { norm.stats.initialized = init_flag_.size() > 0 && init_flag_[0] != 0.0; }
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<NormLayerAdapter>(*this);
  }

  NormLayer norm;

 private:
  Tensor viewed(const Tensor& x) const {
    return x.reshaped({x.shape()[0], x.size() / (x.shape()[0] * view_h_ * view_w_),
                       view_h_, view_w_});
  }

  std::size_t view_h_ = 1, view_w_ = 1;
  Shape in_shape_;
  Tensor init_flag_;  // 1-element mirror of stats.initialized for persistence
};

class Model {
 public:
  Model() = default;
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& dlogits);
  void set_phase(Phase p);
  Phase phase() const { return phase_; }

  std::vector<ParamRef> params();       // trainable tensors
  std::vector<ParamRef> state();        // trainable + running stats + flags
  std::vector<NormLayerAdapter*> norm_layers();
  std::size_t layer_count() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
  Phase phase_ = Phase::train;
};

// Mean cross-entropy over the batch from raw logits (N x Y x 1 x 1 or N x Y)
// against integer labels; gradient is (softmax - onehot) / N.
std::pair<double, Tensor> softmax_xent(const Tensor& logits, const std::vector<int>& labels);

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// Classic momentum with L2 coupled into the velocity:
// v <- momentum * v + (grad + wd * param); param <- param - lr * v.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<ParamRef> params, const SgdConfig& cfg);
  void step(double lr);  // throws NumericError on non-finite gradients

 private:
  std::vector<ParamRef> params_;
  std::vector<Tensor> velocity_;
  SgdConfig cfg_;
};

// Piecewise-constant decay: lr0 * 0.1^(milestones passed), epoch 0-based.
double lr_at(double lr0, const std::vector<int>& milestones, int epoch);

// Default milestones at 65% and 80% of the epoch budget.
std::vector<int> default_milestones(int epochs);

}  // namespace modenorm
