#include "modenorm/norm.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "modenorm/errors.hpp"
#include "modenorm/kernels.hpp"

namespace modenorm {
namespace {

void require_input(const Tensor& x, std::size_t channels, const char* op) {
  if (x.rank() != 4)
    throw std::invalid_argument(std::string(op) + ": expected N x C x H x W, got " +
                                shape_str(x.shape()));
  if (x.shape()[1] != channels)
    throw std::invalid_argument(std::string(op) + ": expected " + std::to_string(channels) +
                                " channels, got " + std::to_string(x.shape()[1]));
}

inline double clamped_var(double m1, double m2) {
  const double v = m2 - m1 * m1;
  return v > 0.0 ? v : 0.0;
}

// Per-(n,c) sums of x and x^2 over the spatial extent.
void spatial_sums(const Tensor& x, Tensor& x1, Tensor& x2) {
  const std::size_t rows = x.shape()[0] * x.shape()[1];
  const std::size_t s = x.shape()[2] * x.shape()[3];
  x1 = Tensor({x.shape()[0], x.shape()[1]});
  x2 = Tensor({x.shape()[0], x.shape()[1]});
  for (std::size_t i = 0; i < rows; ++i)
    kernels::moments(x.data() + i * s, s, x1.data() + i, x2.data() + i);
}

// Per-(n,c) sums of u and u*x; the reductions every backward starts from.
void upstream_sums(const Tensor& u, const Tensor& x, Tensor& su, Tensor& sux) {
  const std::size_t rows = u.shape()[0] * u.shape()[1];
  const std::size_t s = u.shape()[2] * u.shape()[3];
  su = Tensor({u.shape()[0], u.shape()[1]});
  sux = Tensor({u.shape()[0], u.shape()[1]});
  for (std::size_t i = 0; i < rows; ++i) {
    su[i] = kernels::sum(u.data() + i * s, s);
    sux[i] = kernels::dot(u.data() + i * s, x.data() + i * s, s);
  }
}

// y[n,c,:] = (alpha_c * a[n,c]) * x + (alpha_c * b[n,c] + beta_c), composed
// exactly this way so (y - beta) / alpha reproduces the pre-affine tensor.
Tensor apply_plan(const Tensor& x, const Tensor& plan_a, const Tensor& plan_b,
                  const AffineParams& affine) {
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t s = x.shape()[2] * x.shape()[3];
  Tensor y(x.shape());
  if (s == 1) {
    std::vector<double> pa(c), pb(c);
    for (std::size_t i = 0; i < n; ++i) {
      const double* a = plan_a.data() + i * c;
      const double* b = plan_b.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) {
        pa[j] = affine.alpha[j] * a[j];
        pb[j] = affine.alpha[j] * b[j] + affine.beta[j];
      }
      kernels::mul_add(x.data() + i * c, pa.data(), pb.data(), y.data() + i * c, c);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t row = i * c + j;
        kernels::scale_shift(x.data() + row * s, affine.alpha[j] * plan_a[row],
                             affine.alpha[j] * plan_b[row] + affine.beta[j],
                             y.data() + row * s, s);
      }
    }
  }
  return y;
}

// dalpha_c = sum u * z with z read off the cached pre-affine plan;
// dbeta_c = sum u.
void affine_grads(const Tensor& su, const Tensor& sux, const Tensor& plan_a,
                  const Tensor& plan_b, Tensor& dalpha, Tensor& dbeta) {
  const std::size_t n = su.shape()[0], c = su.shape()[1];
  dalpha = Tensor({c});
  dbeta = Tensor({c});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t row = i * c + j;
      dalpha[j] += plan_a[row] * sux[row] + plan_b[row] * su[row];
      dbeta[j] += su[row];
    }
  }
}

ModeBatchStats mode_stats_from_sums(const Tensor& x1, const Tensor& x2, std::size_t spatial,
                                    const Tensor& gates) {
  const std::size_t n = x1.shape()[0], c = x1.shape()[1];
  const std::size_t k = gates.shape()[1];

  ModeBatchStats out;
  out.m1 = Tensor::zeros({k, c});
  out.m2 = Tensor::zeros({k, c});
  out.counts = Tensor::zeros({k});
  out.floored.assign(k, false);

  for (std::size_t i = 0; i < n; ++i) {
    const double* grow = gates.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      out.counts[j] += grow[j];
      kernels::axpy(grow[j], x1.data() + i * c, out.m1.data() + j * c, c);
      kernels::axpy(grow[j], x2.data() + i * c, out.m2.data() + j * c, c);
    }
  }

  // Global batch raw moments, the fallback for starved modes.
  std::vector<double> gm1(c, 0.0), gm2(c, 0.0);
  const double ginv = 1.0 / (static_cast<double>(n) * static_cast<double>(spatial));
  for (std::size_t i = 0; i < n; ++i) {
    kernels::axpy(1.0, x1.data() + i * c, gm1.data(), c);
    kernels::axpy(1.0, x2.data() + i * c, gm2.data(), c);
  }
  for (std::size_t j = 0; j < c; ++j) {
    gm1[j] *= ginv;
    gm2[j] *= ginv;
  }

  for (std::size_t j = 0; j < k; ++j) {
    if (out.counts[j] < kCountFloor) {
      out.floored[j] = true;
      for (std::size_t q = 0; q < c; ++q) {
        out.m1[j * c + q] = gm1[q];
        out.m2[j * c + q] = gm2[q];
      }
    } else {
      const double inv = 1.0 / (out.counts[j] * static_cast<double>(spatial));
      kernels::scale(out.m1.data() + j * c, inv, out.m1.data() + j * c, c);
      kernels::scale(out.m2.data() + j * c, inv, out.m2.data() + j * c, c);
    }
  }
  return out;
}

}  // namespace

ModeBatchStats mode_stats(const Tensor& x, const Tensor& gates) {
  if (x.rank() != 4) throw std::invalid_argument("mode_stats: expected N x C x H x W input");
  if (gates.rank() != 2 || gates.shape()[0] != x.shape()[0])
    throw std::invalid_argument("mode_stats: gates must be N x K with matching N");
  Tensor x1, x2;
  spatial_sums(x, x1, x2);
  return mode_stats_from_sums(x1, x2, x.shape()[2] * x.shape()[3], gates);
}

void update_running(ModeStats& stats, const ModeBatchStats& batch, double lambda) {
  if (!(lambda > 0.0) || lambda > 1.0)
    throw std::invalid_argument("update_running: lambda must lie in (0, 1], got " +
                                std::to_string(lambda));
  if (!stats.initialized) {
    stats.run_m1 = batch.m1;
    stats.run_m2 = batch.m2;
    stats.initialized = true;
    return;
  }
  const std::size_t k = batch.m1.shape()[0], c = batch.m1.shape()[1];
  for (std::size_t j = 0; j < k; ++j) {
    if (batch.floored[j]) continue;
    kernels::scale(stats.run_m1.data() + j * c, 1.0 - lambda, stats.run_m1.data() + j * c, c);
    kernels::axpy(lambda, batch.m1.data() + j * c, stats.run_m1.data() + j * c, c);
    kernels::scale(stats.run_m2.data() + j * c, 1.0 - lambda, stats.run_m2.data() + j * c, c);
    kernels::axpy(lambda, batch.m2.data() + j * c, stats.run_m2.data() + j * c, c);
  }
}

NormLayer::NormLayer(const NormConfig& cfg) : cfg_(cfg) {
  if (cfg.channels == 0) throw std::invalid_argument("norm: channels must be nonzero");
  if (cfg.modes == 0) throw std::invalid_argument("norm: modes must be nonzero");
  if (!(cfg.eps > 0.0)) throw std::invalid_argument("norm: eps must be positive");
  if (!(cfg.lambda > 0.0) || cfg.lambda > 1.0)
    throw std::invalid_argument("norm: lambda must lie in (0, 1]");
  if (cfg.kind == NormKind::group) {
    if (cfg.groups == 0 || cfg.groups > cfg.channels || cfg.channels % cfg.groups != 0)
      throw std::invalid_argument("norm: groups must divide channels (" +
                                  std::to_string(cfg.groups) + " vs " +
                                  std::to_string(cfg.channels) + ")");
  }

  affine.alpha = Tensor::ones({cfg.channels});
  affine.beta = Tensor::zeros({cfg.channels});
  alpha_grad = Tensor::zeros({cfg.channels});
  beta_grad = Tensor::zeros({cfg.channels});

  const std::size_t k = cfg.kind == NormKind::batch ? 1 : cfg.modes;
  if (cfg.kind == NormKind::batch || cfg.kind == NormKind::mode) {
    stats.batch_m1 = Tensor::zeros({k, cfg.channels});
    stats.batch_m2 = Tensor::zeros({k, cfg.channels});
    stats.counts = Tensor::zeros({k});
    stats.run_m1 = Tensor::zeros({k, cfg.channels});
    stats.run_m2 = Tensor::zeros({k, cfg.channels});
  }
  if (cfg.kind == NormKind::mode) {
    gate = SampleGating(cfg.modes, cfg.channels);
    gate_weight_grad = Tensor::zeros({cfg.modes, cfg.channels});
    gate_bias_grad = Tensor::zeros({cfg.modes});
  }
  if (cfg.kind == NormKind::mode_group) {
    cgate = ChannelGating(cfg.modes);
    cgate_weight_grad = Tensor::zeros({cfg.modes});
    cgate_bias_grad = Tensor::zeros({cfg.modes});
  }
}

Tensor NormLayer::forward(const Tensor& x) {
  require_input(x, cfg_.channels, "norm forward");
  switch (cfg_.kind) {
    case NormKind::batch:
    case NormKind::instance:
    case NormKind::layer:
    case NormKind::group:
      return forward_window(x);
    case NormKind::mode:
      return forward_mode(x);
    case NormKind::mode_group:
      return forward_mode_group(x);
  }
  throw std::logic_error("norm forward: unknown kind");
}

Tensor NormLayer::backward(const Tensor& upstream) {
  if (!cache_.valid) throw std::runtime_error("norm backward: no cached forward pass");
  if (!upstream.same_shape(cache_.x))
    throw std::invalid_argument("norm backward: upstream shape " + shape_str(upstream.shape()) +
                                " does not match cached input " + shape_str(cache_.x.shape()));
  if ((cfg_.kind == NormKind::batch || cfg_.kind == NormKind::mode) &&
      cache_.phase != Phase::train)
    throw std::runtime_error("norm backward: cached forward was an eval pass");
  switch (cfg_.kind) {
    case NormKind::batch:
    case NormKind::instance:
    case NormKind::layer:
    case NormKind::group:
      return backward_window(upstream);
    case NormKind::mode:
      return backward_mode(upstream);
    case NormKind::mode_group:
      return backward_mode_group(upstream);
  }
  throw std::logic_error("norm backward: unknown kind");
}

// ---------------------------------------------------------------------------
// Window kinds: batch / instance / layer / group.

Tensor NormLayer::forward_window(const Tensor& x) {
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t s = x.shape()[2] * x.shape()[3];

  Tensor x1, x2;
  spatial_sums(x, x1, x2);

  // Window mean / raw second moment, laid out per kind.
  Tensor m1, m2;
  if (cfg_.kind == NormKind::batch) {
    if (phase_ == Phase::train) {
      m1 = Tensor({c});
      m2 = Tensor({c});
      const double inv = 1.0 / (static_cast<double>(n) * static_cast<double>(s));
      for (std::size_t i = 0; i < n; ++i) {
        kernels::axpy(1.0, x1.data() + i * c, m1.data(), c);
        kernels::axpy(1.0, x2.data() + i * c, m2.data(), c);
      }
      kernels::scale(m1.data(), inv, m1.data(), c);
      kernels::scale(m2.data(), inv, m2.data(), c);

      ModeBatchStats batch;
      batch.m1 = m1.reshaped({1, c});
      batch.m2 = m2.reshaped({1, c});
      batch.counts = Tensor::full({1}, static_cast<double>(n));
      batch.floored.assign(1, false);
      stats.batch_m1 = batch.m1;
      stats.batch_m2 = batch.m2;
      stats.counts = batch.counts;
      update_running(stats, batch, cfg_.lambda);
    } else {
      if (!stats.initialized)
        throw std::runtime_error("norm eval: running statistics not initialized");
      m1 = stats.run_m1.reshaped({c});
      m2 = stats.run_m2.reshaped({c});
    }
  } else if (cfg_.kind == NormKind::instance) {
    m1 = scale(x1, 1.0 / static_cast<double>(s));
    m2 = scale(x2, 1.0 / static_cast<double>(s));
  } else if (cfg_.kind == NormKind::layer) {
    m1 = Tensor({n});
    m2 = Tensor({n});
    const double inv = 1.0 / (static_cast<double>(c) * static_cast<double>(s));
    for (std::size_t i = 0; i < n; ++i) {
      m1[i] = kernels::sum(x1.data() + i * c, c) * inv;
      m2[i] = kernels::sum(x2.data() + i * c, c) * inv;
    }
  } else {  // group
    const std::size_t g = cfg_.groups, span = c / g;
    m1 = Tensor({n, g});
    m2 = Tensor({n, g});
    const double inv = 1.0 / (static_cast<double>(span) * static_cast<double>(s));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < g; ++j) {
        m1[i * g + j] = kernels::sum(x1.data() + i * c + j * span, span) * inv;
        m2[i * g + j] = kernels::sum(x2.data() + i * c + j * span, span) * inv;
      }
    }
  }

  Tensor var(m1.shape()), r(m1.shape());
  for (std::size_t i = 0; i < m1.size(); ++i) {
    var[i] = clamped_var(m1[i], m2[i]);
    r[i] = 1.0 / std::sqrt(var[i] + cfg_.eps);
  }

  // Broadcast the window stats onto the per-(n,c) plan.
  Tensor plan_a({n, c}), plan_b({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t w = 0;
      if (cfg_.kind == NormKind::batch)
        w = j;
      else if (cfg_.kind == NormKind::instance)
        w = i * c + j;
      else if (cfg_.kind == NormKind::layer)
        w = i;
      else
        w = i * cfg_.groups + j / (c / cfg_.groups);
      plan_a[i * c + j] = r[w];
      plan_b[i * c + j] = -m1[w] * r[w];
    }
  }

  Tensor y = apply_plan(x, plan_a, plan_b, affine);

  cache_ = Cache{};
  cache_.valid = true;
  cache_.phase = phase_;
  cache_.x = x;
  cache_.m1 = m1;
  cache_.m2 = m2;
  cache_.var = var;
  cache_.r = r;
  cache_.plan_a = plan_a;
  cache_.plan_b = plan_b;
  return y;
}

Tensor NormLayer::backward_window(const Tensor& upstream) {
  const Tensor& x = cache_.x;
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t s = x.shape()[2] * x.shape()[3];

  Tensor su, sux;
  upstream_sums(upstream, x, su, sux);
  affine_grads(su, sux, cache_.plan_a, cache_.plan_b, alpha_grad, beta_grad);

  // Per-window reductions s1 = sum t, s2 = sum t * (x - mean), t = u * alpha.
  Tensor s1(cache_.m1.shape()), s2(cache_.m1.shape());
  std::vector<double> wcount(cache_.m1.size(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t w = 0;
      if (cfg_.kind == NormKind::batch)
        w = j;
      else if (cfg_.kind == NormKind::instance)
        w = i * c + j;
      else if (cfg_.kind == NormKind::layer)
        w = i;
      else
        w = i * cfg_.groups + j / (c / cfg_.groups);
      const std::size_t row = i * c + j;
      s1[w] += affine.alpha[j] * su[row];
      s2[w] += affine.alpha[j] * (sux[row] - cache_.m1[w] * su[row]);
      wcount[w] += static_cast<double>(s);
    }
  }

  Tensor dx(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t w = 0;
      if (cfg_.kind == NormKind::batch)
        w = j;
      else if (cfg_.kind == NormKind::instance)
        w = i * c + j;
      else if (cfg_.kind == NormKind::layer)
        w = i;
      else
        w = i * cfg_.groups + j / (c / cfg_.groups);
      const double m = wcount[w];
      const double r = cache_.r[w];
      const double mean = cache_.m1[w];
      const double cu = affine.alpha[j] * r;
      const double cx = -r * r * r * s2[w] / m;
      const double c0 = -(r / m) * s1[w] + (r * r * r * s2[w] / m) * mean;
      const std::size_t row = i * c + j;
      kernels::fused_uxc(upstream.data() + row * s, x.data() + row * s, cu, cx, c0,
                         dx.data() + row * s, s);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Mode normalization.

Tensor NormLayer::forward_mode(const Tensor& x) {
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t s = x.shape()[2] * x.shape()[3];
  const std::size_t k = cfg_.modes;

  if (phase_ == Phase::train && !all_finite(x))
    throw NumericError("mode norm: non-finite input in train forward");
  if (phase_ == Phase::eval && !stats.initialized)
    throw std::runtime_error("norm eval: running statistics not initialized");

  Tensor pooled = pool_spatial(x);
  Tensor gates = gate_samples(pooled, gate);

  Tensor x1, x2;
  spatial_sums(x, x1, x2);

  Tensor m1, m2;
  ModeBatchStats batch;
  if (phase_ == Phase::train) {
    batch = mode_stats_from_sums(x1, x2, s, gates);
    m1 = batch.m1;
    m2 = batch.m2;
  } else {
    m1 = stats.run_m1;
    m2 = stats.run_m2;
  }

  Tensor var({k, c}), r({k, c});
  for (std::size_t i = 0; i < k * c; ++i) {
    var[i] = clamped_var(m1[i], m2[i]);
    r[i] = 1.0 / std::sqrt(var[i] + cfg_.eps);
  }

  // mr[k,c] = -m1 * r, so plan_b accumulates the same product chain the
  // normalize sum would.
  Tensor mr({k, c});
  for (std::size_t i = 0; i < k * c; ++i) mr[i] = -m1[i] * r[i];

  Tensor plan_a = Tensor::zeros({n, c});
  Tensor plan_b = Tensor::zeros({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    const double* grow = gates.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) {
      kernels::axpy(grow[j], r.data() + j * c, plan_a.data() + i * c, c);
      kernels::axpy(grow[j], mr.data() + j * c, plan_b.data() + i * c, c);
    }
  }

  Tensor y = apply_plan(x, plan_a, plan_b, affine);

  if (phase_ == Phase::train) {
    stats.batch_m1 = batch.m1;
    stats.batch_m2 = batch.m2;
    stats.counts = batch.counts;
    update_running(stats, batch, cfg_.lambda);
  }

  cache_ = Cache{};
  cache_.valid = true;
  cache_.phase = phase_;
  cache_.x = x;
  cache_.pooled = pooled;
  cache_.gates = gates;
  cache_.x1 = x1;
  cache_.x2 = x2;
  cache_.m1 = m1;
  cache_.m2 = m2;
  cache_.var = var;
  cache_.r = r;
  if (phase_ == Phase::train) {
    cache_.counts = batch.counts;
    cache_.floored = batch.floored;
  }
  cache_.plan_a = plan_a;
  cache_.plan_b = plan_b;
  return y;
}

Tensor NormLayer::backward_mode(const Tensor& upstream) {
  const Tensor& x = cache_.x;
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t s = x.shape()[2] * x.shape()[3];
  const std::size_t k = cfg_.modes;
  const Tensor& gates = cache_.gates;

  Tensor su, sux;
  upstream_sums(upstream, x, su, sux);
  affine_grads(su, sux, cache_.plan_a, cache_.plan_b, alpha_grad, beta_grad);

  // t = u * alpha reductions: st = sum_hw t, stx = sum_hw t*x.
  Tensor st({n, c}), stx({n, c});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      st[i * c + j] = affine.alpha[j] * su[i * c + j];
      stx[i * c + j] = affine.alpha[j] * sux[i * c + j];
    }
  }

  // Gate-weighted sums over the batch: gst = G^T st, gstx = G^T stx (K x C).
  Tensor gt({k, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) gt[j * n + i] = gates[i * k + j];
  Tensor gst = matmul(gt, st);
  Tensor gstx = matmul(gt, stx);

  // Moment adjoints; floored modes were normalized with stats treated as
  // constants of the pass, so their rows stay zero.
  Tensor dm1({k, c}), dm2({k, c});
  for (std::size_t j = 0; j < k; ++j) {
    if (cache_.floored[j]) continue;
    for (std::size_t q = 0; q < c; ++q) {
      const std::size_t i = j * c + q;
      const double r = cache_.r[i];
      const double dr = gstx[i] - cache_.m1[i] * gst[i];
      const double dv = -0.5 * r * r * r * dr;
      dm2[i] = dv;
      dm1[i] = -r * gst[i] - 2.0 * cache_.m1[i] * dv;
    }
  }

  // Stats-to-input: A = W dm1, B = W (2 dm2) with W[n,k] = g[n,k] / (N_k S).
  Tensor w({n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j)
      w[i * k + j] = gates[i * k + j] / (cache_.counts[j] * static_cast<double>(s));
  Tensor dm2x2 = scale(dm2, 2.0);
  Tensor a_term = matmul(w, dm1);
  Tensor b_term = matmul(w, dm2x2);

  // Stats-to-gates: dg_stats[n,k] = sum_c (dm1 (X1/S - m1) + dm2 (X2/S - m2)) / N_k.
  Tensor dm1t({c, k}), dm2t({c, k});
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t q = 0; q < c; ++q) {
      dm1t[q * k + j] = dm1[j * c + q];
      dm2t[q * k + j] = dm2[j * c + q];
    }
  Tensor gs1 = matmul(cache_.x1, dm1t);
  Tensor gs2 = matmul(cache_.x2, dm2t);
  std::vector<double> cterm(k, 0.0);
  for (std::size_t j = 0; j < k; ++j)
    cterm[j] = kernels::dot(dm1.data() + j * c, cache_.m1.data() + j * c, c) +
               kernels::dot(dm2.data() + j * c, cache_.m2.data() + j * c, c);

  // Direct-to-gates: dg_direct = stx r^T - st (m1 r)^T.
  Tensor rt({c, k}), mrt({c, k});
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t q = 0; q < c; ++q) {
      rt[q * k + j] = cache_.r[j * c + q];
      mrt[q * k + j] = cache_.m1[j * c + q] * cache_.r[j * c + q];
    }
  Tensor gd1 = matmul(stx, rt);
  Tensor gd2 = matmul(st, mrt);

  Tensor dgates({n, k});
  const double sinv = 1.0 / static_cast<double>(s);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t e = i * k + j;
      double dstats = 0.0;
      if (!cache_.floored[j])
        dstats = (gs1[e] * sinv + gs2[e] * sinv - cterm[j]) / cache_.counts[j];
      dgates[e] = gd1[e] - gd2[e] + dstats;
    }
  }

  SampleGateGrads ggrads = gate_samples_backward(dgates, cache_.pooled, gates, gate);
  gate_weight_grad = ggrads.dweight;
  gate_bias_grad = ggrads.dbias;

  Tensor dx(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t row = i * c + j;
      const double cu = affine.alpha[j] * cache_.plan_a[row];
      const double cx = b_term[row];
      const double c0 = a_term[row] + ggrads.dpooled[row] * sinv;
      kernels::fused_uxc(upstream.data() + row * s, x.data() + row * s, cu, cx, c0,
                         dx.data() + row * s, s);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Mode group normalization: per-sample scalar mode stats over pooled
// channels, identical in train and eval.

Tensor NormLayer::forward_mode_group(const Tensor& x) {
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t k = cfg_.modes;

  Tensor pooled = pool_spatial(x);

  Tensor gates({n, c, k});
  Tensor counts = Tensor::zeros({n, k});
  Tensor m1 = Tensor::zeros({n, k});
  Tensor m2 = Tensor::zeros({n, k});
  Tensor var({n, k}), r({n, k});
  std::vector<bool> floored(n * k, false);

  for (std::size_t i = 0; i < n; ++i) {
    Tensor prow({c});
    for (std::size_t q = 0; q < c; ++q) prow[q] = pooled[i * c + q];
    Tensor g = gate_channels(prow, cgate);
    for (std::size_t e = 0; e < c * k; ++e) gates[i * c * k + e] = g[e];

    double gm1 = 0.0, gm2 = 0.0;  // all-channel fallback stats
    for (std::size_t q = 0; q < c; ++q) {
      gm1 += prow[q];
      gm2 += prow[q] * prow[q];
    }
    gm1 /= static_cast<double>(c);
    gm2 /= static_cast<double>(c);

    for (std::size_t j = 0; j < k; ++j) {
      double cnt = 0.0, s1 = 0.0, s2 = 0.0;
      for (std::size_t q = 0; q < c; ++q) {
        const double gv = g[q * k + j];
        cnt += gv;
        s1 += gv * prow[q];
        s2 += gv * prow[q] * prow[q];
      }
      const std::size_t e = i * k + j;
      counts[e] = cnt;
      if (cnt < kCountFloor) {
        floored[e] = true;
        m1[e] = gm1;
        m2[e] = gm2;
      } else {
        m1[e] = s1 / cnt;
        m2[e] = s2 / cnt;
      }
      var[e] = clamped_var(m1[e], m2[e]);
      r[e] = 1.0 / std::sqrt(var[e] + cfg_.eps);
    }
  }

  // Eq-style combination has no gate weights: z = (1/K) sum_k (x - mu_k) r_k,
  // so the plan is constant across channels within a sample.
  Tensor plan_a({n, c}), plan_b({n, c});
  const double kinv = 1.0 / static_cast<double>(k);
  for (std::size_t i = 0; i < n; ++i) {
    double rsum = 0.0, q = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      rsum += r[i * k + j];
      q += m1[i * k + j] * r[i * k + j];
    }
    for (std::size_t j = 0; j < c; ++j) {
      plan_a[i * c + j] = rsum * kinv;
      plan_b[i * c + j] = -q * kinv;
    }
  }

  Tensor y = apply_plan(x, plan_a, plan_b, affine);

  cache_ = Cache{};
  cache_.valid = true;
  cache_.phase = phase_;
  cache_.x = x;
  cache_.pooled = pooled;
  cache_.gates = gates;
  cache_.m1 = m1;
  cache_.m2 = m2;
  cache_.var = var;
  cache_.r = r;
  cache_.counts = counts;
  cache_.floored = floored;
  cache_.plan_a = plan_a;
  cache_.plan_b = plan_b;
  return y;
}

Tensor NormLayer::backward_mode_group(const Tensor& upstream) {
  const Tensor& x = cache_.x;
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  const std::size_t s = x.shape()[2] * x.shape()[3];
  const std::size_t k = cfg_.modes;
  const double kinv = 1.0 / static_cast<double>(k);
  const double sinv = 1.0 / static_cast<double>(s);

  Tensor su, sux;
  upstream_sums(upstream, x, su, sux);
  affine_grads(su, sux, cache_.plan_a, cache_.plan_b, alpha_grad, beta_grad);

  cgate_weight_grad = Tensor::zeros({k});
  cgate_bias_grad = Tensor::zeros({k});

  Tensor dx(x.shape());
  std::vector<double> dmu(k), dm2(k), dxp(c);
  for (std::size_t i = 0; i < n; ++i) {
    // t = u * alpha / K reductions over the sample.
    double tsum = 0.0, txsum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      tsum += affine.alpha[j] * su[i * c + j] * kinv;
      txsum += affine.alpha[j] * sux[i * c + j] * kinv;
    }

    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t e = i * k + j;
      if (cache_.floored[e]) {
        dmu[j] = 0.0;
        dm2[j] = 0.0;
        continue;
      }
      const double r = cache_.r[e];
      const double dr = txsum - cache_.m1[e] * tsum;
      const double dv = -0.5 * r * r * r * dr;
      dm2[j] = dv;
      dmu[j] = -r * tsum - 2.0 * cache_.m1[e] * dv;
    }

    const double* g = cache_.gates.data() + i * c * k;
    Tensor dgates({c, k});
    Tensor prow({c}), grow({c, k});
    for (std::size_t q = 0; q < c; ++q) prow[q] = cache_.pooled[i * c + q];
    for (std::size_t e = 0; e < c * k; ++e) grow[e] = g[e];

    for (std::size_t q = 0; q < c; ++q) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t e = i * k + j;
        if (cache_.floored[e]) {
          dgates[q * k + j] = 0.0;
          continue;
        }
        const double cnt = cache_.counts[e];
        acc += (g[q * k + j] / cnt) * (dmu[j] + 2.0 * prow[q] * dm2[j]);
        dgates[q * k + j] = (dmu[j] * (prow[q] - cache_.m1[e]) +
                             dm2[j] * (prow[q] * prow[q] - cache_.m2[e])) /
                            cnt;
      }
      dxp[q] = acc;
    }

    ChannelGateGrads ggrads = gate_channels_backward(dgates, prow, grow, cgate);
    kernels::axpy(1.0, ggrads.dweight.data(), cgate_weight_grad.data(), k);
    kernels::axpy(1.0, ggrads.dbias.data(), cgate_bias_grad.data(), k);

    for (std::size_t q = 0; q < c; ++q) {
      const std::size_t row = i * c + q;
      const double cu = affine.alpha[q] * cache_.plan_a[row];
      const double c0 = (dxp[q] + ggrads.dpooled[q]) * sinv;
      kernels::fused_uxc(upstream.data() + row * s, x.data() + row * s, cu, 0.0, c0,
                         dx.data() + row * s, s);
    }
  }
  return dx;
}

}  // namespace modenorm
