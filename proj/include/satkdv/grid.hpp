#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "satkdv/errors.hpp"

namespace satkdv {

// Uniform grid x_k = x_min + k*h, k = 0..n-1. Immutable after construction.
struct Grid {
  double x_min = 0.0;
  double h = 1.0;
  std::size_t n = 0;

  double x(std::size_t k) const { return x_min + h * static_cast<double>(k); }
  double x_max() const { return x(n - 1); }
  double length() const { return h * static_cast<double>(n - 1); }

  bool same_as(const Grid& o, double tol = 1e-12) const {
    return n == o.n && std::abs(x_min - o.x_min) <= tol && std::abs(h - o.h) <= tol;
  }
};

// Symmetric grid on [-half_length, +half_length]; n must be odd so 0 is a node.
Grid make_symmetric(double half_length, std::size_t n);

// Grid on [x_min, x_max] with both endpoints included.
Grid make_uniform(double x_min, double x_max, std::size_t n);

// Periodic sampling of [-half_length, +half_length): n nodes, right endpoint omitted.
Grid make_periodic(double half_length, std::size_t n);

struct GridFunction {
  Grid grid;
  std::vector<double> values;

  GridFunction() = default;
  explicit GridFunction(const Grid& g) : grid(g), values(g.n, 0.0) {}
  GridFunction(const Grid& g, std::vector<double> v) : grid(g), values(std::move(v)) {}

  std::size_t size() const { return values.size(); }
  double& operator[](std::size_t k) { return values[k]; }
  double operator[](std::size_t k) const { return values[k]; }
};

// Evaluate fn at every node.
GridFunction sample(const Grid& g, const std::function<double(double)>& fn);

// Finite-difference derivative of order 1, 2 or 3; centered high-order stencils
// in the interior, one-sided stencils of the same accuracy at the boundaries.
GridFunction differentiate(const GridFunction& f, int order);

// Composite end-corrected quadrature, 4th-order accurate. Weights are
// h*(17/48, 59/48, 43/48, 49/48, 1, ..., 1, 49/48, 43/48, 59/48, 17/48).
double integrate(const GridFunction& f);
std::vector<double> quadrature_weights(const Grid& g);

// L2 scalar product (f, g) = integral of f*g over the grid.
double inner(const GridFunction& f, const GridFunction& g);

double l2_norm(const GridFunction& f);
double sup_norm(const GridFunction& f);

// Cumulative integral I(x_k) = integral from x_min to x_k (4th-order, cubic panels).
GridFunction cumulative_from_left(const GridFunction& f);
// I(x_k) = integral from x_k to x_max, plus an analytic tail beyond the boundary.
GridFunction cumulative_from_right(const GridFunction& f, double tail = 0.0);

// Piecewise 6-point Lagrange interpolation; x must lie inside [x_min, x_max].
double interpolate(const GridFunction& f, double x);

// Finite-difference weights for the m-th derivative at x0 from arbitrary nodes
// (Fornberg's recursion).
std::vector<double> fd_weights(double x0, const std::vector<double>& nodes, int m);

// Two-column CSV with header "x,value", '.' decimal separator, LF line endings.
void write_csv(const std::string& path, const GridFunction& f);
GridFunction read_csv(const std::string& path);

// Enforce the finiteness invariant; throws "nan-detected" on violation.
void ensure_finite(const GridFunction& f, const std::string& context);

}  // namespace satkdv
