#pragma once

#include <cstddef>
#include <span>
#include <vector>

// Lorentz (hyperboloid) model primitives. Points live on the upper sheet
// {x in R^{n+1} : <x,x>_L = -1, x_0 > 0}.
namespace cekg::hyp {

inline constexpr double kManifoldTolerance = 1e-6;

// -x0*y0 + sum_i xi*yi. Throws DimensionMismatch on unequal or too-short input.
double lorentz_inner(std::span<const double> x, std::span<const double> y);

// |<x,x>_L + 1|
double constraint_residual(std::span<const double> x);

class LorentzPoint {
 public:
  LorentzPoint() = default;

  // Lifts spatial coordinates onto the sheet: x0 = sqrt(1 + |x_s|^2).
  static LorentzPoint from_spatial(std::span<const double> spatial);
  // Validates the constraint; throws OffManifold if the residual exceeds the tolerance.
  static LorentzPoint from_coords(std::vector<double> coords);
  static LorentzPoint origin(std::size_t spatial_dim);

  std::span<const double> coords() const { return coords_; }
  std::size_t spatial_dim() const { return coords_.empty() ? 0 : coords_.size() - 1; }
  double operator[](std::size_t i) const { return coords_[i]; }

  friend bool operator==(const LorentzPoint&, const LorentzPoint&) = default;

 private:
  explicit LorentzPoint(std::vector<double> coords) : coords_(std::move(coords)) {}
  std::vector<double> coords_;
};

double lorentz_distance(const LorentzPoint& x, const LorentzPoint& y);
// Raw-coordinate variant used inside the trainer; checks the constraint on both inputs.
double lorentz_distance(std::span<const double> x, std::span<const double> y);

// Block-diagonal Givens rotation of the spatial coordinates. Angle k rotates
// the spatial pair (2k+1, 2k+2); with an odd spatial dimension the last
// coordinate is left untouched. The time coordinate is never modified, so the
// Lorentz constraint holds exactly.
class LorentzRotation {
 public:
  LorentzRotation() = default;
  explicit LorentzRotation(std::size_t spatial_dim);
  LorentzRotation(std::size_t spatial_dim, std::vector<double> angles);

  static std::size_t angle_count(std::size_t spatial_dim) { return spatial_dim / 2; }

  std::size_t spatial_dim() const { return spatial_dim_; }
  std::span<const double> angles() const { return angles_; }

  LorentzRotation inverse() const;

  // out may not alias in. Both have length spatial_dim + 1.
  void apply(std::span<const double> in, std::span<double> out) const;

 private:
  std::size_t spatial_dim_ = 0;
  std::vector<double> angles_;
};

LorentzPoint apply_rotation(const LorentzRotation& rotation, const LorentzPoint& x);

// Tangent-space projection at x: u + <x,u>_L x.
std::vector<double> tangent_project(std::span<const double> x, std::span<const double> u);

// Riemannian gradient from an ambient Euclidean gradient: project(x, J * egrad)
// with J = diag(-1, 1, ..., 1).
std::vector<double> riemannian_gradient(std::span<const double> x, std::span<const double> euclidean_gradient);

// Exponential map at x along tangent vector v, followed by x0 renormalization.
LorentzPoint exp_map(const LorentzPoint& x, std::span<const double> v);

// One Riemannian SGD step: exp_x(-lr * grad_R). Zero gradient returns x unchanged.
LorentzPoint riemannian_step(const LorentzPoint& point, std::span<const double> euclidean_gradient, double lr);

// Gradient of arcosh(-<x,y>_L) with respect to the ambient coordinates of x.
// Near the diagonal the denominator is clamped to keep the result finite.
std::vector<double> distance_gradient(std::span<const double> x, std::span<const double> y);

}  // namespace cekg::hyp
