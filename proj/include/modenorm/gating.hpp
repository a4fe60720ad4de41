#pragma once

#include <cstddef>

#include "modenorm/tensor.hpp"

namespace modenorm {

// Affine-then-softmax mixture assignment. Sample gating scores each sample's
// spatially pooled channel vector against K modes; channel gating scores each
// pooled channel value independently. Zero-initialized parameters give
// exactly uniform gates, so a K-mode layer starts out mode-agnostic.

struct SampleGating {
  Tensor weight;  // K x C
  Tensor bias;    // K
  SampleGating() = default;
  SampleGating(std::size_t modes, std::size_t channels)
      : weight(Tensor::zeros({modes, channels})), bias(Tensor::zeros({modes})) {}
  std::size_t modes() const { return weight.shape()[0]; }
  std::size_t channels() const { return weight.shape()[1]; }
};

struct ChannelGating {
  Tensor weight;  // K
  Tensor bias;    // K
  ChannelGating() = default;
  explicit ChannelGating(std::size_t modes)
      : weight(Tensor::zeros({modes})), bias(Tensor::zeros({modes})) {}
  std::size_t modes() const { return weight.shape()[0]; }
};

// N x C x H x W -> N x C mean over the spatial extent.
Tensor pool_spatial(const Tensor& x);

// Logits l[r][k] = dot(weight[k], pooled[r]) + bias[k]; gates are the
// max-subtracted softmax of each row. Rows are row-stochastic by
// construction. Throws NumericError on non-finite logits.
Tensor gate_samples(const Tensor& pooled, const SampleGating& params);

// Same contract with scalar inputs: l[c][k] = weight[k] * pooled[c] + bias[k].
Tensor gate_channels(const Tensor& pooled, const ChannelGating& params);

struct SampleGateGrads {
  Tensor dpooled;  // N x C
  Tensor dweight;  // K x C
  Tensor dbias;    // K
};

struct ChannelGateGrads {
  Tensor dpooled;  // C
  Tensor dweight;  // K
  Tensor dbias;    // K
};

// Reverse-mode through softmax and the affine map, given dL/dgates and the
// forward pair (pooled, gates).
SampleGateGrads gate_samples_backward(const Tensor& dgates, const Tensor& pooled,
                                      const Tensor& gates, const SampleGating& params);
ChannelGateGrads gate_channels_backward(const Tensor& dgates, const Tensor& pooled,
                                        const Tensor& gates, const ChannelGating& params);

}  // namespace modenorm
