#include "modenorm/gating.hpp"

#include <cmath>
#include <stdexcept>

#include "modenorm/errors.hpp"
#include "modenorm/kernels.hpp"

namespace modenorm {
namespace {

void require_rank4(const Tensor& x, const char* op) {
  if (x.rank() != 4)
    throw std::invalid_argument(std::string(op) + ": expected N x C x H x W, got " +
                                shape_str(x.shape()));
}

// In-place max-subtracted softmax over a length-k row.
void softmax_row(double* row, std::size_t k) {
  double m = row[0];
  for (std::size_t i = 1; i < k; ++i) m = std::max(m, row[i]);
  double denom = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    row[i] = std::exp(row[i] - m);
    denom += row[i];
  }
  for (std::size_t i = 0; i < k; ++i) row[i] /= denom;
}

// dlogit[k] = g[k] * (dg[k] - sum_j dg[j] g[j]) for one row.
void softmax_backward_row(const double* dg, const double* g, double* dlogit, std::size_t k) {
  const double inner = kernels::dot(dg, g, k);
  for (std::size_t i = 0; i < k; ++i) dlogit[i] = g[i] * (dg[i] - inner);
}

}  // namespace

Tensor pool_spatial(const Tensor& x) {
  require_rank4(x, "pool_spatial");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t s = x.shape()[2] * x.shape()[3];
  Tensor out({n, c});
  const double inv = 1.0 / static_cast<double>(s);
  for (std::size_t i = 0; i < n * c; ++i)
    out[i] = kernels::sum(x.data() + i * s, s) * inv;
  return out;
}

Tensor gate_samples(const Tensor& pooled, const SampleGating& params) {
  if (pooled.rank() != 2)
    throw std::invalid_argument("gate_samples: expected N x C pooled input, got " +
                                shape_str(pooled.shape()));
  const std::size_t n = pooled.shape()[0], c = pooled.shape()[1];
  const std::size_t k = params.modes();
  if (params.channels() != c)
    throw std::invalid_argument("gate_samples: gating expects " +
                                std::to_string(params.channels()) + " channels, got " +
                                std::to_string(c));

  Tensor gates({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double* row = gates.data() + i * k;
    const double* xp = pooled.data() + i * c;
    for (std::size_t j = 0; j < k; ++j)
      row[j] = kernels::dot(params.weight.data() + j * c, xp, c) + params.bias[j];
    for (std::size_t j = 0; j < k; ++j) {
      if (!std::isfinite(row[j]))
        throw NumericError("gate_samples: non-finite logit at sample " + std::to_string(i));
    }
    softmax_row(row, k);
  }
  return gates;
}

Tensor gate_channels(const Tensor& pooled, const ChannelGating& params) {
  if (pooled.rank() != 1)
    throw std::invalid_argument("gate_channels: expected rank-1 pooled channels, got " +
                                shape_str(pooled.shape()));
  const std::size_t c = pooled.shape()[0];
  const std::size_t k = params.modes();

  Tensor gates({c, k});
  for (std::size_t i = 0; i < c; ++i) {
    double* row = gates.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) row[j] = params.weight[j] * pooled[i] + params.bias[j];
    for (std::size_t j = 0; j < k; ++j) {
      if (!std::isfinite(row[j]))
        throw NumericError("gate_channels: non-finite logit at channel " + std::to_string(i));
    }
    softmax_row(row, k);
  }
  return gates;
}

SampleGateGrads gate_samples_backward(const Tensor& dgates, const Tensor& pooled,
                                      const Tensor& gates, const SampleGating& params) {
  const std::size_t n = pooled.shape()[0], c = pooled.shape()[1];
  const std::size_t k = params.modes();
  if (!dgates.same_shape(gates) || gates.shape() != Shape{n, k})
    throw std::invalid_argument("gate_samples_backward: inconsistent cached shapes");

  SampleGateGrads out;
  out.dpooled = Tensor::zeros({n, c});
  out.dweight = Tensor::zeros({k, c});
  out.dbias = Tensor::zeros({k});

  std::vector<double> dlogit(k);
  for (std::size_t i = 0; i < n; ++i) {
    softmax_backward_row(dgates.data() + i * k, gates.data() + i * k, dlogit.data(), k);
    const double* xp = pooled.data() + i * c;
    double* dxp = out.dpooled.data() + i * c;
    for (std::size_t j = 0; j < k; ++j) {
      kernels::axpy(dlogit[j], xp, out.dweight.data() + j * c, c);
      kernels::axpy(dlogit[j], params.weight.data() + j * c, dxp, c);
      out.dbias[j] += dlogit[j];
    }
  }
  return out;
}

ChannelGateGrads gate_channels_backward(const Tensor& dgates, const Tensor& pooled,
                                        const Tensor& gates, const ChannelGating& params) {
  const std::size_t c = pooled.shape()[0];
  const std::size_t k = params.modes();
  if (!dgates.same_shape(gates) || gates.shape() != Shape{c, k})
    throw std::invalid_argument("gate_channels_backward: inconsistent cached shapes");

  ChannelGateGrads out;
  out.dpooled = Tensor::zeros({c});
  out.dweight = Tensor::zeros({k});
  out.dbias = Tensor::zeros({k});

  std::vector<double> dlogit(k);
  for (std::size_t i = 0; i < c; ++i) {
    softmax_backward_row(dgates.data() + i * k, gates.data() + i * k, dlogit.data(), k);
    for (std::size_t j = 0; j < k; ++j) {
      out.dweight[j] += dlogit[j] * pooled[i];
      out.dbias[j] += dlogit[j];
      out.dpooled[i] += dlogit[j] * params.weight[j];
    }
  }
  return out;
}

}  // namespace modenorm
