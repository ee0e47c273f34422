#include "satkdv/grid.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace satkdv {

Grid make_symmetric(double half_length, std::size_t n) {
  require(half_length > 0.0, "invalid-argument", "half_length must be positive");
  require(n >= 8, "invalid-argument", "need at least 8 nodes");
  require(n % 2 == 1, "invalid-argument", "n must be odd so that 0 is a node");
  Grid g;
  g.x_min = -half_length;
  g.n = n;
  g.h = 2.0 * half_length / static_cast<double>(n - 1);
  return g;
}

Grid make_uniform(double x_min, double x_max, std::size_t n) {
  require(x_max > x_min, "invalid-argument", "empty interval");
  require(n >= 8, "invalid-argument", "need at least 8 nodes");
  Grid g;
  g.x_min = x_min;
  g.n = n;
  g.h = (x_max - x_min) / static_cast<double>(n - 1);
  return g;
}

Grid make_periodic(double half_length, std::size_t n) {
  require(half_length > 0.0, "invalid-argument", "half_length must be positive");
  require(n >= 8, "invalid-argument", "need at least 8 nodes");
  Grid g;
  g.x_min = -half_length;
  g.n = n;
  g.h = 2.0 * half_length / static_cast<double>(n);
  return g;
}

GridFunction sample(const Grid& g, const std::function<double(double)>& fn) {
  GridFunction f(g);
  for (std::size_t k = 0; k < g.n; ++k) f.values[k] = fn(g.x(k));
  ensure_finite(f, "sample");
  return f;
}

std::vector<double> fd_weights(double x0, const std::vector<double>& nodes, int m) {
  // Fornberg's recursion for finite-difference weights on arbitrary nodes.
  const int nn = static_cast<int>(nodes.size());
  std::vector<std::vector<double>> c(nn, std::vector<double>(m + 1, 0.0));
  double c1 = 1.0;
  double c4 = nodes[0] - x0;
  c[0][0] = 1.0;
  for (int i = 1; i < nn; ++i) {
    const int mn = std::min(i, m);
    double c2 = 1.0;
    const double c5 = c4;
    c4 = nodes[i] - x0;
    for (int j = 0; j < i; ++j) {
      const double c3 = nodes[i] - nodes[j];
      c2 *= c3;
      if (j == i - 1) {
        for (int k = mn; k >= 1; --k)
          c[i][k] = c1 * (k * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
        c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
      }
      for (int k = mn; k >= 1; --k)
        c[j][k] = (c4 * c[j][k] - k * c[j][k - 1]) / c3;
      c[j][0] = c4 * c[j][0] / c3;
    }
    c1 = c2;
  }
  std::vector<double> w(nn);
  for (int i = 0; i < nn; ++i) w[i] = c[i][m];
  return w;
}

namespace {

// Stencil widths: centered radius and one-sided width; 8th-order for first
// and second derivatives, 6th-order for third derivatives.
struct StencilSpec {
  std::size_t radius;    // centered stencil half-width
  std::size_t boundary;  // one-sided stencil width
};

StencilSpec stencil_for(int order) {
  switch (order) {
    case 1: return {4, 9};
    case 2: return {4, 10};
    case 3: return {4, 9};
    default: fail("invalid-argument", "derivative order must be 1, 2 or 3");
  }
}

}  // namespace

GridFunction differentiate(const GridFunction& f, int order) {
  const Grid& g = f.grid;
  require(g.n >= 10, "invalid-argument", "need at least 10 nodes to differentiate");
  const StencilSpec sp = stencil_for(order);
  const std::size_t r = sp.radius;
  const std::size_t bw = sp.boundary;

  // Interior weights once (uniform spacing), boundary rows individually.
  std::vector<double> offs(2 * r + 1);
  for (std::size_t i = 0; i <= 2 * r; ++i)
    offs[i] = (static_cast<double>(i) - static_cast<double>(r)) * g.h;
  std::vector<double> wint = fd_weights(0.0, offs, order);
  // Restore the exact (anti)symmetry and zero sum of the centered weights,
  // so constants map to zero bitwise and even data stays even.
  const double sign = (order % 2 == 0) ? 1.0 : -1.0;
  for (std::size_t i = 0; i < r; ++i) {
    const double avg = 0.5 * (wint[i] + sign * wint[2 * r - i]);
    wint[i] = avg;
    wint[2 * r - i] = sign * avg;
  }
  if (order % 2 == 1) {
    wint[r] = 0.0;
  } else {
    double s = 0.0;
    for (std::size_t i = 0; i <= 2 * r; ++i)
      if (i != r) s += wint[i];
    wint[r] = -s;
  }

  GridFunction out(g);
  for (std::size_t k = r; k + r < g.n; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i <= 2 * r; ++i) acc += wint[i] * f.values[k - r + i];
    out.values[k] = acc;
  }
  auto one_sided = [&](std::size_t k, std::size_t lo) {
    std::vector<double> xs(bw);
    for (std::size_t i = 0; i < bw; ++i) xs[i] = g.x(lo + i);
    std::vector<double> w = fd_weights(g.x(k), xs, order);
    double sum = 0.0;
    for (const double v : w) sum += v;
    w[k - lo] -= sum;  // derivatives of constants vanish exactly
    double acc = 0.0;
    for (std::size_t i = 0; i < bw; ++i) acc += w[i] * f.values[lo + i];
    out.values[k] = acc;
  };
  for (std::size_t k = 0; k < r; ++k) one_sided(k, 0);
  for (std::size_t k = g.n - r; k < g.n; ++k) one_sided(k, g.n - bw);
  ensure_finite(out, "differentiate");
  return out;
}

std::vector<double> quadrature_weights(const Grid& g) {
  require(g.n >= 8, "invalid-argument", "quadrature needs at least 8 nodes");
  static const double edge[4] = {17.0 / 48.0, 59.0 / 48.0, 43.0 / 48.0, 49.0 / 48.0};
  std::vector<double> w(g.n, g.h);
  for (std::size_t i = 0; i < 4; ++i) {
    w[i] = edge[i] * g.h;
    w[g.n - 1 - i] = edge[i] * g.h;
  }
  return w;
}

double integrate(const GridFunction& f) {
  const std::vector<double> w = quadrature_weights(f.grid);
  double acc = 0.0;
  for (std::size_t k = 0; k < f.size(); ++k) acc += w[k] * f.values[k];
  return acc;
}

double inner(const GridFunction& f, const GridFunction& g) {
  require(f.grid.same_as(g.grid), "grid-mismatch", "inner product needs matching grids");
  const std::vector<double> w = quadrature_weights(f.grid);
  double acc = 0.0;
  for (std::size_t k = 0; k < f.size(); ++k) acc += w[k] * (f.values[k] * g.values[k]);
  return acc;
}

double l2_norm(const GridFunction& f) { return std::sqrt(std::max(0.0, inner(f, f))); }

double sup_norm(const GridFunction& f) {
  double m = 0.0;
  for (double v : f.values) m = std::max(m, std::abs(v));
  return m;
}

namespace {

// Weights (in units of h) integrating the quintic through six consecutive
// nodes over the interval [pos, pos+1] of the window; solved once from the
// moment conditions sum_i w_i i^j = ((pos+1)^{j+1} - pos^{j+1})/(j+1).
std::array<double, 6> quintic_panel_weights(int pos) {
  long double a[6][7];
  for (int j = 0; j < 6; ++j) {
    for (int i = 0; i < 6; ++i) {
      a[j][i] = (j == 0) ? 1.0L : powl(static_cast<long double>(i), j);
    }
    a[j][6] = (powl(pos + 1.0L, j + 1) - powl(static_cast<long double>(pos), j + 1)) /
              (j + 1);
  }
  for (int col = 0; col < 6; ++col) {
    int piv = col;
    for (int row = col + 1; row < 6; ++row)
      if (fabsl(a[row][col]) > fabsl(a[piv][col])) piv = row;
    for (int j = 0; j < 7; ++j) std::swap(a[col][j], a[piv][j]);
    for (int row = 0; row < 6; ++row) {
      if (row == col) continue;
      const long double factor = a[row][col] / a[col][col];
      for (int j = col; j < 7; ++j) a[row][j] -= factor * a[col][j];
    }
  }
  std::array<double, 6> w{};
  for (int i = 0; i < 6; ++i) w[i] = static_cast<double>(a[i][6] / a[i][i]);
  return w;
}

// Integral over one panel [x_k, x_{k+1}] from the quintic through six
// neighbors (window shifted inward near the ends).
double panel(const GridFunction& f, std::size_t k) {
  static const std::array<std::array<double, 6>, 5> table = [] {
    std::array<std::array<double, 6>, 5> t{};
    for (int pos = 0; pos < 5; ++pos) t[static_cast<std::size_t>(pos)] = quintic_panel_weights(pos);
    return t;
  }();
  const std::size_t n = f.size();
  const std::size_t lo = std::min(k >= 2 ? k - 2 : 0, n - 6);
  const auto& w = table[k - lo];
  double acc = 0.0;
  for (std::size_t i = 0; i < 6; ++i) acc += w[i] * f[lo + i];
  return f.grid.h * acc;
}

}  // namespace

GridFunction cumulative_from_left(const GridFunction& f) {
  require(f.size() >= 8, "invalid-argument", "cumulative integral needs at least 8 nodes");
  GridFunction out(f.grid);
  out.values[0] = 0.0;
  for (std::size_t k = 0; k + 1 < f.size(); ++k)
    out.values[k + 1] = out.values[k] + panel(f, k);
  ensure_finite(out, "cumulative_from_left");
  return out;
}

GridFunction cumulative_from_right(const GridFunction& f, double tail) {
  require(f.size() >= 8, "invalid-argument", "cumulative integral needs at least 8 nodes");
  GridFunction out(f.grid);
  out.values[f.size() - 1] = tail;
  for (std::size_t k = f.size() - 1; k > 0; --k)
    out.values[k - 1] = out.values[k] + panel(f, k - 1);
  ensure_finite(out, "cumulative_from_right");
  return out;
}

double interpolate(const GridFunction& f, double x) {
  const Grid& g = f.grid;
  const double eps = 1e-9 * g.h;
  require(x >= g.x_min - eps && x <= g.x_max() + eps, "out-of-domain",
          "interpolation point outside the grid");
  x = std::clamp(x, g.x_min, g.x_max());
  const std::size_t width = std::min<std::size_t>(6, g.n);
  const auto cell = static_cast<std::ptrdiff_t>(std::floor((x - g.x_min) / g.h));
  std::ptrdiff_t lo = cell - 2;
  lo = std::clamp<std::ptrdiff_t>(lo, 0, static_cast<std::ptrdiff_t>(g.n - width));
  // Lagrange interpolation on the 6-node window around the containing cell.
  double acc = 0.0;
  for (std::size_t i = 0; i < width; ++i) {
    const std::size_t ki = static_cast<std::size_t>(lo) + i;
    double li = 1.0;
    for (std::size_t j = 0; j < width; ++j) {
      if (j == i) continue;
      const std::size_t kj = static_cast<std::size_t>(lo) + j;
      li *= (x - g.x(kj)) / (g.x(ki) - g.x(kj));
    }
    acc += li * f.values[ki];
  }
  return acc;
}

void write_csv(const std::string& path, const GridFunction& f) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "invalid-argument", "cannot open " + path + " for writing");
  os << "x,value\n";
  char buf[80];
  for (std::size_t k = 0; k < f.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", f.grid.x(k), f.values[k]);
    os << buf;
  }
}

GridFunction read_csv(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), "invalid-argument", "cannot open " + path);
  std::string line;
  std::getline(is, line);  // header
  std::vector<double> xs, vs;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    require(comma != std::string::npos, "invalid-argument", "malformed CSV row: " + line);
    xs.push_back(std::stod(line.substr(0, comma)));
    vs.push_back(std::stod(line.substr(comma + 1)));
  }
  require(xs.size() >= 8, "invalid-argument", "CSV has fewer than 8 rows");
  Grid g;
  g.x_min = xs.front();
  g.n = xs.size();
  g.h = (xs.back() - xs.front()) / static_cast<double>(xs.size() - 1);
  for (std::size_t k = 0; k < xs.size(); ++k)
    require(std::abs(xs[k] - g.x(k)) <= 1e-9 * (1.0 + std::abs(xs[k])), "invalid-argument",
            "CSV x-column is not uniformly spaced");
  return GridFunction(g, std::move(vs));
}

void ensure_finite(const GridFunction& f, const std::string& context) {
  for (double v : f.values)
    if (!std::isfinite(v)) fail("nan-detected", "non-finite value in " + context);
}

}  // namespace satkdv
