#include "nailforce/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nailforce::calib {

Vec3 torque_shift(const Vec3& f, const ContactPoint& p) {
  return {f[2] * p.y - f[1] * p.z,
          -f[2] * p.x + f[0] * p.z,
          -f[0] * p.y + f[1] * p.x};
}

namespace {

double residual_norm(const Vec3& f, const Vec3& dtau, const ContactPoint& p) {
  const Vec3 m = torque_shift(f, p);
  double s = 0.0;
  for (int k = 0; k < 3; ++k) s += (m[k] - dtau[k]) * (m[k] - dtau[k]);
  return std::sqrt(s);
}

ContactPoint on_surface(const SurfaceSpec& s, double x, double y) {
  return {x, y, s.height(x, y)};
}

// Pulls (x,y) strictly inside the parametric domain of h.
void project(const SurfaceSpec& s, double& x, double& y) {
  const double lim = 0.999 * s.domain_limit();
  if (!std::isfinite(lim)) return;
  if (s.shape == SurfaceShape::Sphere) {
    const double r = std::hypot(x, y);
    if (r > lim) {
      x *= lim / r;
      y *= lim / r;
    }
  } else if (s.shape == SurfaceShape::Cylinder) {
    double& u = s.cylinder_axis == Axis::X ? y : x;
    u = std::clamp(u, -lim, lim);
  }
}

// Levenberg-damped Gauss-Newton on (x,y) with z = h(x,y) substituted.
ContactPoint gauss_newton(const Vec3& f, const Vec3& dtau, const SurfaceSpec& s,
                          double x, double y, int max_iter) {
  project(s, x, y);
  double lambda = 1e-9;
  double cost = residual_norm(f, dtau, on_surface(s, x, y));
  for (int it = 0; it < max_iter && cost > 0.0; ++it) {
    const auto [hx, hy] = s.height_gradient(x, y);
    const ContactPoint p = on_surface(s, x, y);
    const Vec3 m = torque_shift(f, p);
    const Vec3 r = {m[0] - dtau[0], m[1] - dtau[1], m[2] - dtau[2]};
    // d(torque_shift)/dx, /dy, /dz
    const Vec3 dx = {0.0, -f[2], f[1]};
    const Vec3 dy = {f[2], 0.0, -f[0]};
    const Vec3 dz = {-f[1], f[0], 0.0};
    Vec3 jx, jy;
    for (int k = 0; k < 3; ++k) {
      jx[k] = dx[k] + dz[k] * hx;
      jy[k] = dy[k] + dz[k] * hy;
    }
    double a = 0, b = 0, c = 0, gx = 0, gy = 0;
    for (int k = 0; k < 3; ++k) {
      a += jx[k] * jx[k];
      b += jx[k] * jy[k];
      c += jy[k] * jy[k];
      gx += jx[k] * r[k];
      gy += jy[k] * r[k];
    }
    bool accepted = false;
    for (int tries = 0; tries < 30; ++tries) {
      const double a2 = a * (1.0 + lambda), c2 = c * (1.0 + lambda);
      const double det = a2 * c2 - b * b;
      if (!(std::abs(det) > 0.0)) {
        lambda = std::max(lambda * 10.0, 1e-12);
        continue;
      }
      double sx = -(c2 * gx - b * gy) / det;
      double sy = -(a2 * gy - b * gx) / det;
      double nx = x + sx, ny = y + sy;
      project(s, nx, ny);
      const double ncost = residual_norm(f, dtau, on_surface(s, nx, ny));
      if (ncost <= cost) {
        const double step = std::hypot(nx - x, ny - y);
        x = nx;
        y = ny;
        cost = ncost;
        lambda = std::max(lambda * 0.1, 1e-15);
        accepted = true;
        if (step < 1e-13 * (1.0 + std::hypot(x, y))) return on_surface(s, x, y);
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) break;
  }
  return on_surface(s, x, y);
}

}  // namespace

ContactPoint solve_contact(const Vec3& f, const Vec3& dtau, const SurfaceSpec& surface,
                           const ContactSolverOptions& opts) {
  if (!(f[2] >= opts.min_fz)) {
    throw Error(ErrorKind::IllConditioned,
                "solve_contact: normal force below " + std::to_string(opts.min_fz) + " N");
  }
  // Closed form on the z = 0 plane; exact for flat surfaces.
  const double x0 = -dtau[1] / f[2];
  const double y0 = dtau[0] / f[2];
  ContactPoint best{x0, y0, 0.0};
  if (surface.shape != SurfaceShape::Flat) {
    best = gauss_newton(f, dtau, surface, x0, y0, opts.max_iterations);
    if (residual_norm(f, dtau, best) > opts.residual_tol) {
      // grid search fallback, then refine
      const double lim = std::min(opts.grid_half_width, 0.999 * surface.domain_limit());
      double best_cost = std::numeric_limits<double>::infinity();
      ContactPoint seed = best;
      const int n = std::max(opts.grid_points, 3);
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          double x = -lim + 2.0 * lim * i / (n - 1);
          double y = -lim + 2.0 * lim * j / (n - 1);
          project(surface, x, y);
          const ContactPoint p = on_surface(surface, x, y);
          const double cst = residual_norm(f, dtau, p);
          if (cst < best_cost) {
            best_cost = cst;
            seed = p;
          }
        }
      }
      best = gauss_newton(f, dtau, surface, seed.x, seed.y, opts.max_iterations);
    }
  }
  if (residual_norm(f, dtau, best) > opts.residual_tol) {
    throw Error(ErrorKind::NoConsistentContact,
                "solve_contact: torque residual " +
                    std::to_string(residual_norm(f, dtau, best)) + " N*mm above tolerance");
  }
  return best;
}

std::vector<Wrench> calibrate_torques(std::span<const Wrench> wrenches,
                                      const ContactPoint& contact) {
  std::vector<Wrench> out(wrenches.begin(), wrenches.end());
  for (auto& w : out) {
    const Vec3 d = torque_shift(w.f, contact);
    for (int k = 0; k < 3; ++k) w.tau[k] -= d[k];
  }
  return out;
}

Vec3 rotate_forces(const Vec3& f, double theta_deg, double theta_r_deg) {
  const double a = (theta_deg - theta_r_deg) * M_PI / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  return {c * f[0] - s * f[1], s * f[0] + c * f[1], f[2]};
}

EarlyContact early_contact(std::span<const Wrench> wrenches, double force_rate,
                           const ContactWindowOptions& opts) {
  const std::size_t n = wrenches.size();
  const auto sustain = static_cast<std::size_t>(
      std::max<long>(1, std::lround(opts.onset_sustain_s * force_rate)));
  std::size_t onset = n;
  for (std::size_t i = 0; i + sustain <= n; ++i) {
    bool ok = true;
    for (std::size_t j = i; j < i + sustain; ++j) {
      if (!(wrenches[j].f[2] > opts.onset_fz)) {
        ok = false;
        i = j;  // skip past the failing sample
        break;
      }
    }
    if (ok) {
      onset = i;
      break;
    }
  }
  if (onset == n) {
    throw Error(ErrorKind::IllConditioned, "early_contact: no contact onset found");
  }
  EarlyContact ec;
  ec.onset_index = onset;
  int used = 0;
  for (std::size_t i = onset; i < n && used < opts.samples; ++i) {
    const auto& f = wrenches[i].f;
    if (std::sqrt(f[0] * f[0] + f[1] * f[1] + f[2] * f[2]) > opts.min_force) {
      for (int k = 0; k < 3; ++k) {
        ec.mean_force[k] += f[k];
        ec.mean_torque[k] += wrenches[i].tau[k];
      }
      ++used;
    }
  }
  if (used < opts.samples) {
    throw Error(ErrorKind::IllConditioned, "early_contact: too few samples above force threshold");
  }
  for (int k = 0; k < 3; ++k) {
    ec.mean_force[k] /= used;
    ec.mean_torque[k] /= used;
  }
  return ec;
}

TorqueCalibration calibrate_trial_torques(std::span<const Wrench> wrenches,
                                          double force_rate, const SurfaceSpec& surface,
                                          const ContactWindowOptions& window,
                                          const ContactSolverOptions& solver) {
  const EarlyContact ec = early_contact(wrenches, force_rate, window);
  TorqueCalibration out;
  out.contact = solve_contact(ec.mean_force, ec.mean_torque, surface, solver);
  out.wrenches = calibrate_torques(wrenches, out.contact);
  return out;
}

int marker_angle_search(std::span<const AngleSample> samples, int lo, int hi) {
  if (samples.empty()) throw Error(ErrorKind::InvalidInput, "marker_angle_search: no samples");
  int best = 0;
  double best_err = std::numeric_limits<double>::infinity();
  for (int alpha = lo; alpha <= hi; ++alpha) {
    double acc = 0.0;
    for (const auto& s : samples) {
      const Vec3 r = rotate_forces({s.fx_truth, s.fy_truth, 0.0}, alpha, 0.0);
      acc += (r[0] - s.fx_pred) * (r[0] - s.fx_pred) + (r[1] - s.fy_pred) * (r[1] - s.fy_pred);
    }
    const double err = std::sqrt(acc / samples.size());
    const double tol = std::isfinite(best_err) ? 1e-12 * std::max(1.0, best_err) : 0.0;
    if (err < best_err - tol ||
        (std::abs(err - best_err) <= tol && std::abs(alpha) < std::abs(best))) {
      best = alpha;
      best_err = err;
    }
  }
  return best;
}

}  // namespace nailforce::calib
