#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"

#include "cekg/error.hpp"
#include "cekg/lorentz.hpp"
#include "cekg/random.hpp"

using namespace cekg;
using namespace cekg::hyp;

namespace {

LorentzPoint random_point(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> s(n);
  for (auto& x : s) x = rng.normal(0.0, scale);
  return LorentzPoint::from_spatial(s);
}

std::vector<double> random_tangent(Rng& rng, const LorentzPoint& x) {
  std::vector<double> u(x.coords().size());
  for (auto& v : u) v = rng.normal();
  return tangent_project(x.coords(), u);
}

}  // namespace

TEST_CASE("lorentz_inner closed forms") {
  const std::vector<double> o{1, 0, 0};
  CHECK(lorentz_inner(o, o) == -1.0);
  const std::vector<double> x{std::sqrt(2.0), 1, 0};
  const long double expected = -std::sqrt(2.0L);
  CHECK(std::fabs(static_cast<long double>(lorentz_inner(x, o)) - expected) < 1e-15L);
  CHECK_THROWS_AS(lorentz_inner(std::vector<double>{1, 0}, o), Error);
  CHECK_THROWS_AS(lorentz_inner(std::vector<double>{1}, std::vector<double>{1}), Error);
}

TEST_CASE("lorentz_inner is symmetric and bilinear") {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_point(rng, 4), b = random_point(rng, 4), c = random_point(rng, 4);
    CHECK(lorentz_inner(a.coords(), b.coords()) == lorentz_inner(b.coords(), a.coords()));
    std::vector<double> sum(5);
    for (std::size_t k = 0; k < 5; ++k) sum[k] = 2.0 * a[k] + b[k];
    const double lhs = lorentz_inner(sum, c.coords());
    const double rhs = 2.0 * lorentz_inner(a.coords(), c.coords()) + lorentz_inner(b.coords(), c.coords());
    CHECK(std::fabs(lhs - rhs) < 1e-9 * (1.0 + std::fabs(rhs)));
  }
}

TEST_CASE("lorentz_distance") {
  const auto o = LorentzPoint::origin(2);
  const auto x = LorentzPoint::from_coords({std::sqrt(2.0), 1.0, 0.0});
  const long double root2 = std::sqrt(2.0L);
  const long double expected = std::log(root2 + std::sqrt(root2 * root2 - 1.0L));
  CHECK(std::fabs(static_cast<long double>(lorentz_distance(x, o)) - expected) < 1e-12L);
  CHECK(lorentz_distance(x, o) == doctest::Approx(0.881374).epsilon(1e-6));
  CHECK(lorentz_distance(x, x) == 0.0);

  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_point(rng, 3, 0.8), b = random_point(rng, 3, 0.8), c = random_point(rng, 3, 0.8);
    CHECK(lorentz_distance(a, a) == 0.0);
    CHECK(lorentz_distance(a, b) == lorentz_distance(b, a));
    CHECK(lorentz_distance(a, c) <= lorentz_distance(a, b) + lorentz_distance(b, c) + 1e-9);
  }
}

TEST_CASE("off-manifold input is rejected") {
  CHECK_THROWS_AS(LorentzPoint::from_coords({1.0, 1.0, 0.0}), Error);
  CHECK_THROWS_AS(LorentzPoint::from_coords({-1.0, 0.0, 0.0}), Error);
  const std::vector<double> bad{2.0, 0.0, 0.0}, o{1.0, 0.0, 0.0};
  try {
    lorentz_distance(bad, o);
    FAIL("expected OffManifold");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::OffManifold);
  }
}

TEST_CASE("rotations") {
  Rng rng(7);
  SUBCASE("zero angles are the identity") {
    const auto x = random_point(rng, 6);
    CHECK(apply_rotation(LorentzRotation(6), x) == x);
  }
  SUBCASE("isometry, exact constraint and inverse") {
    for (int i = 0; i < 200; ++i) {
      std::vector<double> angles(3);
      for (auto& a : angles) a = rng.uniform(-3.14, 3.14);
      const LorentzRotation r(6, angles);
      const auto x = random_point(rng, 6), y = random_point(rng, 6);
      const auto rx = apply_rotation(r, x), ry = apply_rotation(r, y);
      CHECK(std::fabs(lorentz_distance(rx, ry) - lorentz_distance(x, y)) < 1e-9);
      CHECK(std::fabs(lorentz_inner(rx.coords(), rx.coords()) - lorentz_inner(x.coords(), x.coords())) < 1e-12);
      CHECK(rx[0] == x[0]);
      const auto back = apply_rotation(r.inverse(), rx);
      for (std::size_t k = 0; k < 7; ++k) CHECK(std::fabs(back[k] - x[k]) < 1e-12);
    }
  }
  SUBCASE("odd spatial dimension leaves the last coordinate alone") {
    const LorentzRotation r(3, {0.7});
    const auto x = random_point(rng, 3);
    CHECK(apply_rotation(r, x)[3] == x[3]);
  }
}

TEST_CASE("riemannian_step") {
  Rng rng(11);
  const auto x = random_point(rng, 4);
  const std::vector<double> zero(5, 0.0);
  CHECK(riemannian_step(x, zero, 0.1) == x);

  for (int i = 0; i < 50; ++i) {
    const auto p = random_point(rng, 4);
    std::vector<double> g(5);
    for (auto& v : g) v = rng.normal();
    const auto q = riemannian_step(p, g, 0.05);
    CHECK(constraint_residual(q.coords()) < 1e-9);
    CHECK(q[0] > 0.0);
  }
}

TEST_CASE("geodesic from the origin") {
  for (double s : {0.1, 0.5, 1.0, 2.5}) {
    const auto o = LorentzPoint::origin(3);
    const std::vector<double> v{0.0, s, 0.0, 0.0};
    const auto y = exp_map(o, v);
    CHECK(std::fabs(y[0] - std::cosh(s)) < 1e-12 * std::cosh(s));
    CHECK(std::fabs(y[1] - std::sinh(s)) < 1e-12 * std::cosh(s));
    CHECK(y[2] == 0.0);
    CHECK(y[3] == 0.0);
    CHECK(std::fabs(lorentz_distance(o, y) - s) < 1e-9);
  }
}

TEST_CASE("riemannian gradient of the distance matches central differences") {
  Rng rng(13);
  for (int i = 0; i < 50; ++i) {
    const auto x = random_point(rng, 4, 0.7);
    const auto y = random_point(rng, 4, 0.7);
    const auto egrad = distance_gradient(x.coords(), y.coords());
    const auto rgrad = riemannian_gradient(x.coords(), egrad);
    const auto v = random_tangent(rng, x);
    const double h = 1e-5;
    std::vector<double> vp(v), vm(v);
    for (auto& a : vp) a *= h;
    for (auto& a : vm) a *= -h;
    const double fd = (lorentz_distance(exp_map(x, vp), y) - lorentz_distance(exp_map(x, vm), y)) / (2 * h);
    const double analytic = lorentz_inner(rgrad, v);
    CHECK(std::fabs(fd - analytic) <= 1e-4 * std::max(1.0, std::fabs(analytic)));
  }
}
