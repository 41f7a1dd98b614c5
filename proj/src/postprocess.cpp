#include "nailforce/postprocess.hpp"

#include <algorithm>
#include <cmath>

#include "nailforce/core.hpp"

namespace nailforce::post {

void SmootherConfig::validate() const {
  if (degree != 2) throw Error(ErrorKind::Config, "smoother degree is fixed at 2");
  if (span < degree + 2 || span % 2 == 0) {
    throw Error(ErrorKind::Config, "smoother span must be odd and >= degree + 2");
  }
  if (robust_iterations < 0) throw Error(ErrorKind::Config, "robust_iterations must be >= 0");
}

namespace {

double tricube(double d) {
  if (d >= 1.0) return 0.0;
  const double t = 1.0 - d * d * d;
  return t * t * t;
}

// Weighted quadratic fit around u = 0; returns the fitted value at u = 0.
// The window widens while fewer than three points carry robustness weight.
double local_fit(std::span<const double> y, std::span<const double> robust, int i, int half) {
  const int n = static_cast<int>(y.size());
  for (;; ++half) {
    const int lo = std::max(0, i - half);
    const int hi = std::min(n - 1, i + half);
    const double bandwidth = half + 1.0;
    // normal equations for [1, u, u^2]
    double s[5] = {0, 0, 0, 0, 0};
    double t[3] = {0, 0, 0};
    double wsum = 0.0, wy = 0.0;
    int active = 0;
    for (int j = lo; j <= hi; ++j) {
      const double u = j - i;
      const double w = tricube(std::abs(u) / bandwidth) * robust[j];
      if (w <= 0.0) continue;
      ++active;
      double p = w;
      for (int k = 0; k < 5; ++k) {
        s[k] += p;
        if (k < 3) t[k] += p * y[j];
        p *= u;
      }
      wsum += w;
      wy += w * y[j];
    }
    const bool whole = lo == 0 && hi == n - 1;
    if (active < 3 && !whole) continue;
    if (active == 0) return y[i];
    const double a00 = s[0], a01 = s[1], a02 = s[2], a11 = s[2], a12 = s[3], a22 = s[4];
    const double c00 = a11 * a22 - a12 * a12;
    const double c01 = a02 * a12 - a01 * a22;
    const double c02 = a01 * a12 - a02 * a11;
    const double det = a00 * c00 + a01 * c01 + a02 * c02;
    const double scale = a00 * a11 * a22;
    if (active < 3 || !(std::abs(det) > 1e-12 * std::max(scale, 1e-300))) {
      return wy / wsum;
    }
    return (c00 * t[0] + c01 * t[1] + c02 * t[2]) / det;
  }
}

double median(std::vector<double> v) {
  const auto mid = v.begin() + static_cast<long>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

}  // namespace

std::vector<double> smooth(std::span<const double> series, const SmootherConfig& config) {
  config.validate();
  const int n = static_cast<int>(series.size());
  if (n < config.degree + 2) {
    throw Error(ErrorKind::InvalidInput, "smooth: series shorter than degree + 2");
  }
  int span = std::min(config.span, n % 2 == 1 ? n : n - 1);
  const int half = span / 2;

  std::vector<double> robust(n, 1.0);
  std::vector<double> fit(n);
  double yscale = 0.0;
  for (double v : series) yscale = std::max(yscale, std::abs(v));

  for (int iter = 0;; ++iter) {
    for (int i = 0; i < n; ++i) fit[i] = local_fit(series, robust, i, half);
    if (iter == config.robust_iterations) break;
    std::vector<double> absres(n);
    for (int i = 0; i < n; ++i) absres[i] = std::abs(series[i] - fit[i]);
    const double mad = std::max(median(absres), 1e-12 * std::max(1.0, yscale));
    for (int i = 0; i < n; ++i) {
      const double u = absres[i] / (6.0 * mad);
      robust[i] = u < 1.0 ? (1.0 - u * u) * (1.0 - u * u) : 0.0;
    }
  }
  return fit;
}

}  // namespace nailforce::post
