#pragma once

#include <cstddef>
#include <vector>

#include "modenorm/gating.hpp"
#include "modenorm/tensor.hpp"

namespace modenorm {

// Normalization family over N x C x H x W activations. Window kinds (batch,
// instance, layer, group) normalize fixed partitions; the mode kinds learn a
// soft partition through gating. Batch and mode normalization carry running
// raw moments for the eval phase; the others behave identically in both
// phases. group with groups=1 coincides with layer, groups=C with instance.
enum class NormKind { batch, instance, layer, group, mode, mode_group };

enum class Phase { train, eval };

struct AffineParams {
  Tensor alpha;  // C, ones at init
  Tensor beta;   // C, zeros at init
};

// Raw-moment state: first and second moments, never mean/variance pairs, so
// the running blend and the variance clamp share one representation.
struct ModeStats {
  Tensor batch_m1, batch_m2;  // K x C, last train batch
  Tensor counts;              // K, soft sample counts of the last train batch
  Tensor run_m1, run_m2;      // K x C
  bool initialized = false;   // first train batch copies batch into running
};

struct NormConfig {
  NormKind kind = NormKind::batch;
  std::size_t channels = 0;
  std::size_t modes = 1;   // K, mode kinds only
  std::size_t groups = 1;  // group kind only, must divide channels
  double lambda = 0.1;     // running blend weight, in (0, 1]
  double eps = 1e-5;       // variance guard, > 0
};

// Soft counts below this floor make a mode fall back to the global batch
// statistics for the pass; its running stats are left untouched.
constexpr double kCountFloor = 1e-6;

struct ModeBatchStats {
  Tensor m1, m2;  // K x C gate-weighted raw moments
  Tensor counts;  // K
  std::vector<bool> floored;
};

// Gate-weighted raw moments over a batch: counts[k] = sum_n g[n,k] and
// m1[k,c] = sum_{n,h,w} g[n,k] x[n,c,h,w] / (counts[k] * H * W), m2 likewise
// with x^2.
ModeBatchStats mode_stats(const Tensor& x, const Tensor& gates);

// run <- lambda * batch + (1 - lambda) * run. The first call copies the batch
// stats (flooring included); later calls skip floored modes.
void update_running(ModeStats& stats, const ModeBatchStats& batch, double lambda);

class NormLayer {
 public:
  explicit NormLayer(const NormConfig& cfg);

  // Train phase consumes batch statistics (and for batch/mode kinds updates
  // the running moments); eval phase reads running moments and mutates
  // nothing. Input must be N x C x H x W with C matching the config.
  Tensor forward(const Tensor& x);

  // Reverse mode from the last forward; overwrites the layer's grad buffers
  // and returns dL/dx. Kinds with phase-dependent statistics require the
  // cached forward to be a train pass.
  Tensor backward(const Tensor& upstream);

  void set_phase(Phase p) { phase_ = p; }
  Phase phase() const { return phase_; }
  const NormConfig& config() const { return cfg_; }

  bool gated() const { return cfg_.kind == NormKind::mode || cfg_.kind == NormKind::mode_group; }
  bool tracks_running() const {
    return cfg_.kind == NormKind::batch || cfg_.kind == NormKind::mode;
  }

  AffineParams affine;
  Tensor alpha_grad, beta_grad;  // C

  SampleGating gate;  // mode kind
  Tensor gate_weight_grad, gate_bias_grad;
  ChannelGating cgate;  // mode_group kind
  Tensor cgate_weight_grad, cgate_bias_grad;

  ModeStats stats;  // batch (K=1) and mode (K=modes) kinds

  // Intermediates of the last forward, exposed for the backward pass, the
  // moment-invariant tests, and gate-usage reporting. Stat layouts by kind:
  // batch: C; instance: N x C; layer: N; group: N x G; mode: K x C;
  // mode_group: N x K. gates is N x K for mode, N x C x K for mode_group.
  struct Cache {
    bool valid = false;
    Phase phase = Phase::train;
    Tensor x;
    Tensor pooled;  // N x C
    Tensor gates;
    Tensor x1, x2;  // N x C spatial sums of x and x^2 (mode kind)
    Tensor m1, m2, var, r;
    Tensor counts;  // mode: K; mode_group: N x K
    std::vector<bool> floored;
    Tensor plan_a, plan_b;  // N x C: pre-affine z[n,c,:] = a[n,c] * x + b[n,c]
  };
  const Cache& cache() const { return cache_; }

 private:
  Tensor forward_window(const Tensor& x);
  Tensor forward_mode(const Tensor& x);
  Tensor forward_mode_group(const Tensor& x);
  Tensor backward_window(const Tensor& upstream);
  Tensor backward_mode(const Tensor& upstream);
  Tensor backward_mode_group(const Tensor& upstream);

  NormConfig cfg_;
  Phase phase_ = Phase::train;
  Cache cache_;
};

}  // namespace modenorm
