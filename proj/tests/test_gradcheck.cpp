#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "doctest.h"
#include "modenorm/errors.hpp"
#include "modenorm/gradcheck.hpp"
#include "modenorm/tensor.hpp"

using namespace modenorm;

TEST_CASE("numeric gradient of a quadratic matches 2x") {
  Tensor x({3});
  x[0] = 2.0; x[1] = 3.0; x[2] = 4.0;
  auto f = [](const Tensor& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * t[i];
    return s;
  };
  const Tensor g = numeric_grad(f, x);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(g[i] == doctest::Approx(2.0 * x[i]).epsilon(1e-9));
}

TEST_CASE("numeric gradient of a constant is zero") {
  Tensor x({4});
  const Tensor g = numeric_grad([](const Tensor&) { return 7.5; }, x);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("central difference is high-order accurate on a polynomial") {
  Tensor x({2});
  x[0] = 0.3; x[1] = -0.7;
  auto f = [](const Tensor& t) { return t[0] * t[0] * t[0] + 2.0 * t[1] * t[1] + t[0] * t[1]; };
  const Tensor g = numeric_grad(f, x, 1e-5);
  CHECK(std::abs(g[0] - (3.0 * x[0] * x[0] + x[1])) < 1e-9);
  CHECK(std::abs(g[1] - (4.0 * x[1] + x[0])) < 1e-9);
}

TEST_CASE("check passes matching grads and fails a broken backward") {
  Tensor x({3});
  x[0] = 1.0; x[1] = -2.0; x[2] = 0.5;
  auto f = [](const Tensor& t) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) s += std::sin(t[i]);
    return s;
  };
  const Tensor numeric = numeric_grad(f, x);
  Tensor analytic({3});
  for (std::size_t i = 0; i < 3; ++i) analytic[i] = std::cos(x[i]);

  const GradReport good = check(analytic, numeric);
  CHECK(good.pass);
  CHECK(good.checked == 3);
  CHECK(good.failing.empty());
  CHECK(good.max_rel_err < 1e-6);

  Tensor broken = analytic;
  broken[1] = -broken[1] + 0.3;  // wrong sign and offset
  const GradReport bad = check(broken, numeric);
  CHECK_FALSE(bad.pass);
  REQUIRE(bad.failing.size() == 1);
  CHECK(bad.failing[0] == 1);
}

TEST_CASE("merge concatenates reports with offset failing indices") {
  Tensor a({2}), b({3});
  a[0] = 1.0;  // analytic disagrees with a zero numeric grad at index 0
  const GradReport ra = check(a, Tensor({2}));
  b[2] = 5.0;
  const GradReport rb = check(b, Tensor({3}));
  const GradReport m = merge(ra, rb);
  CHECK_FALSE(m.pass);
  CHECK(m.checked == 5);
  REQUIRE(m.failing.size() == 2);
  CHECK(m.failing[0] == 0);
  CHECK(m.failing[1] == 4);  // index 2 of the second report, offset by 2
  CHECK_FALSE(report_str(m).empty());
}

TEST_CASE("numeric_grad validates the step and finiteness") {
  Tensor x({2});
  auto f = [](const Tensor& t) { return t[0] + t[1]; };
  CHECK_THROWS_AS(numeric_grad(f, x, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(numeric_grad(f, x, -1e-6), std::invalid_argument);
  auto nan_f = [](const Tensor&) { return std::nan(""); };
  CHECK_THROWS_AS(numeric_grad(nan_f, x), NumericError);
}
