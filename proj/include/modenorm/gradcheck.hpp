#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "modenorm/tensor.hpp"

namespace modenorm {

struct GradReport {
  bool pass = true;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;                // |a-n| / max(|a|, |n|), worst entry
  std::vector<std::size_t> failing;        // flat indices outside tolerance
  std::size_t checked = 0;
};

// Central finite differences of a scalar-valued function, coordinate by
// coordinate: (f(x+h e_i) - f(x-h e_i)) / 2h. Throws NumericError if any
// evaluation is non-finite.
Tensor numeric_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                    double h = 1e-6);

// Entry i passes when |a_i - n_i| <= atol + rtol * max(|a_i|, |n_i|).
GradReport check(const Tensor& analytic, const Tensor& numeric, double rtol = 1e-5,
                 double atol = 1e-8);

// Merge per-tensor reports into one (used by the per-layer suites); failing
// indices keep their per-tensor meaning and are offset by prior sizes.
GradReport merge(const GradReport& a, const GradReport& b);

std::string report_str(const GradReport& r);

}  // namespace modenorm
