#include "modenorm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "modenorm/errors.hpp"

namespace modenorm {

Tensor numeric_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("numeric_grad: step h must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("numeric_grad: non-finite evaluation at flat index " + std::to_string(i));
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

GradReport check(const Tensor& analytic, const Tensor& numeric, double rtol, double atol) {
  if (!analytic.same_shape(numeric))
    throw std::invalid_argument("gradcheck: analytic/numeric shape mismatch " +
                                shape_str(analytic.shape()) + " vs " + shape_str(numeric.shape()));
  GradReport r;
  r.checked = analytic.size();
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double abs_err = std::fabs(a - n);
    const double mag = std::max(std::fabs(a), std::fabs(n));
    r.max_abs_err = std::max(r.max_abs_err, abs_err);
    if (mag > 0.0) r.max_rel_err = std::max(r.max_rel_err, abs_err / mag);
    if (abs_err > atol + rtol * mag) {
      r.pass = false;
      r.failing.push_back(i);
    }
  }
  return r;
}

GradReport merge(const GradReport& a, const GradReport& b) {
  GradReport r;
  r.pass = a.pass && b.pass;
  r.max_abs_err = std::max(a.max_abs_err, b.max_abs_err);
  r.max_rel_err = std::max(a.max_rel_err, b.max_rel_err);
  r.checked = a.checked + b.checked;
  r.failing = a.failing;
  for (std::size_t idx : b.failing) r.failing.push_back(a.checked + idx);
  return r;
}

std::string report_str(const GradReport& r) {
  std::ostringstream os;
  os << (r.pass ? "pass" : "FAIL") << " checked=" << r.checked
     << " max_abs_err=" << r.max_abs_err << " max_rel_err=" << r.max_rel_err;
  if (!r.failing.empty()) {
    os << " failing=[";
    const std::size_t show = std::min<std::size_t>(r.failing.size(), 8);
    for (std::size_t i = 0; i < show; ++i) {
      if (i) os << ",";
      os << r.failing[i];
    }
    if (r.failing.size() > show) os << ",...(" << r.failing.size() << " total)";
    os << "]";
  }
  return os.str();
}

}  // namespace modenorm
