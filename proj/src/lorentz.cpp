#include "cekg/lorentz.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cekg/error.hpp"

namespace cekg::hyp {

namespace {

constexpr double kMinSinhArg = 1e-12;

void require_same_length(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    fail(ErrorCode::DimensionMismatch,
         "lorentz vectors must have equal length >= 2 (got " + std::to_string(x.size()) + " and " +
             std::to_string(y.size()) + ")");
  }
}

void require_on_manifold(std::span<const double> x) {
  const double r = constraint_residual(x);
  if (!(r <= kManifoldTolerance) || !(x[0] > 0.0)) {
    fail(ErrorCode::OffManifold, "point is off the hyperboloid (residual " + std::to_string(r) + ")");
  }
}

}  // namespace

double lorentz_inner(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y);
  double s = -x[0] * y[0];
  for (std::size_t i = 1; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

double constraint_residual(std::span<const double> x) { return std::abs(lorentz_inner(x, x) + 1.0); }

LorentzPoint LorentzPoint::from_spatial(std::span<const double> spatial) {
  std::vector<double> c(spatial.size() + 1);
  double s = 0.0;
  for (std::size_t i = 0; i < spatial.size(); ++i) {
    c[i + 1] = spatial[i];
    s += spatial[i] * spatial[i];
  }
  c[0] = std::sqrt(1.0 + s);
  return LorentzPoint(std::move(c));
}

LorentzPoint LorentzPoint::from_coords(std::vector<double> coords) {
  if (coords.size() < 2) fail(ErrorCode::DimensionMismatch, "lorentz point needs at least 2 coordinates");
  require_on_manifold(coords);
  return LorentzPoint(std::move(coords));
}

LorentzPoint LorentzPoint::origin(std::size_t spatial_dim) {
  std::vector<double> c(spatial_dim + 1, 0.0);
  c[0] = 1.0;
  return LorentzPoint(std::move(c));
}

double lorentz_distance(std::span<const double> x, std::span<const double> y) {
  require_same_length(x, y);
  require_on_manifold(x);
  require_on_manifold(y);
  const double arg = -lorentz_inner(x, y);
  if (arg > 1.0 + 1e-4) return std::acosh(arg);
  // Near the diagonal 1 + <x-y, x-y>_L / 2 avoids the cancellation in -<x,y> - 1.
  double delta = -(x[0] - y[0]) * (x[0] - y[0]);
  for (std::size_t i = 1; i < x.size(); ++i) delta += (x[i] - y[i]) * (x[i] - y[i]);
  delta = std::max(0.0, 0.5 * delta);
  return std::log1p(delta + std::sqrt(delta * (delta + 2.0)));
}

double lorentz_distance(const LorentzPoint& x, const LorentzPoint& y) {
  return lorentz_distance(x.coords(), y.coords());
}

LorentzRotation::LorentzRotation(std::size_t spatial_dim)
    : spatial_dim_(spatial_dim), angles_(angle_count(spatial_dim), 0.0) {}

LorentzRotation::LorentzRotation(std::size_t spatial_dim, std::vector<double> angles)
    : spatial_dim_(spatial_dim), angles_(std::move(angles)) {
  if (angles_.size() != angle_count(spatial_dim_)) {
    fail(ErrorCode::DimensionMismatch, "rotation over " + std::to_string(spatial_dim_) + " spatial dims needs " +
                                           std::to_string(angle_count(spatial_dim_)) + " angles");
  }
}

LorentzRotation LorentzRotation::inverse() const {
  std::vector<double> neg(angles_.size());
  std::transform(angles_.begin(), angles_.end(), neg.begin(), [](double a) { return -a; });
  return LorentzRotation(spatial_dim_, std::move(neg));
}

void LorentzRotation::apply(std::span<const double> in, std::span<double> out) const {
  if (in.size() != spatial_dim_ + 1 || out.size() != in.size()) {
    fail(ErrorCode::DimensionMismatch, "rotation/point dimension mismatch");
  }
  out[0] = in[0];
  for (std::size_t k = 0; k < angles_.size(); ++k) {
    const std::size_t a = 2 * k + 1;
    const std::size_t b = a + 1;
    const double c = std::cos(angles_[k]);
    const double s = std::sin(angles_[k]);
    out[a] = c * in[a] - s * in[b];
    out[b] = s * in[a] + c * in[b];
  }
  if (spatial_dim_ % 2 == 1) out[spatial_dim_] = in[spatial_dim_];
}

LorentzPoint apply_rotation(const LorentzRotation& rotation, const LorentzPoint& x) {
  std::vector<double> out(x.coords().size());
  rotation.apply(x.coords(), out);
  // Time coordinate is copied and spatial norms are preserved, so the
  // constraint residual is unchanged up to rounding.
  return LorentzPoint::from_coords(std::move(out));
}

std::vector<double> tangent_project(std::span<const double> x, std::span<const double> u) {
  const double xu = lorentz_inner(x, u);
  std::vector<double> v(u.begin(), u.end());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += xu * x[i];
  return v;
}

std::vector<double> riemannian_gradient(std::span<const double> x, std::span<const double> euclidean_gradient) {
  std::vector<double> h(euclidean_gradient.begin(), euclidean_gradient.end());
  if (h.size() != x.size()) fail(ErrorCode::DimensionMismatch, "gradient/point dimension mismatch");
  h[0] = -h[0];
  return tangent_project(x, h);
}

LorentzPoint exp_map(const LorentzPoint& x, std::span<const double> v) {
  const auto xc = x.coords();
  const double vv = lorentz_inner(v, v);
  const double norm = std::sqrt(std::max(vv, 0.0));
  if (norm == 0.0) return x;
  std::vector<double> out(xc.size());
  const double ch = std::cosh(norm);
  const double sh_over = norm < kMinSinhArg ? 1.0 : std::sinh(norm) / norm;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ch * xc[i] + sh_over * v[i];
  std::vector<double> spatial(out.begin() + 1, out.end());
  return LorentzPoint::from_spatial(spatial);
}

LorentzPoint riemannian_step(const LorentzPoint& point, std::span<const double> euclidean_gradient, double lr) {
  auto g = riemannian_gradient(point.coords(), euclidean_gradient);
  bool zero = true;
  for (auto& gi : g) {
    if (gi != 0.0) zero = false;
    gi *= -lr;
  }
  if (zero) return point;
  return exp_map(point, g);
}

std::vector<double> distance_gradient(std::span<const double> x, std::span<const double> y) {
  const double u = std::max(1.0, -lorentz_inner(x, y));
  const double denom = std::sqrt(std::max(u * u - 1.0, 1e-12));
  std::vector<double> g(x.size());
  // d/dx <x,y>_L = J y, and d arcosh(u)/du = 1/sqrt(u^2-1) with u = -<x,y>_L.
  g[0] = y[0] / denom;
  for (std::size_t i = 1; i < x.size(); ++i) g[i] = -y[i] / denom;
  return g;
}

}  // namespace cekg::hyp
