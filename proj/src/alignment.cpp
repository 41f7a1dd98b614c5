#include "nailforce/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nailforce::align {

namespace {

// Cubic B-spline basis at fractional offset t in [0,1).
std::array<double, 4> bspline(double t) {
  const double t2 = t * t, t3 = t2 * t;
  const double s = 1.0 - t;
  return {s * s * s / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
          (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0, t3 / 6.0};
}

struct AxisWeights {
  std::vector<int> base;
  std::vector<std::array<double, 4>> w;
};

AxisWeights axis_weights(int n, double spacing) {
  AxisWeights aw;
  aw.base.resize(n);
  aw.w.resize(n);
  for (int p = 0; p < n; ++p) {
    const double u = p / spacing;
    const int i = static_cast<int>(std::floor(u));
    aw.base[p] = i;
    aw.w[p] = bspline(u - i);
  }
  return aw;
}

void add_level_field(const ControlGrid& g, int height, int width, DisplacementField& out) {
  const AxisWeights ry = axis_weights(height, g.spacing);
  const AxisWeights cx = axis_weights(width, g.spacing);
  // separable: contract control columns first, then control rows
  const std::size_t W = static_cast<std::size_t>(width);
  std::vector<double> tx(static_cast<std::size_t>(g.rows) * W), ty(tx.size());
  for (int i = 0; i < g.rows; ++i) {
    const std::size_t row = static_cast<std::size_t>(i) * g.cols;
    for (int c = 0; c < width; ++c) {
      const std::size_t k = row + cx.base[c];
      const auto& wx = cx.w[c];
      tx[i * W + c] = wx[0] * g.dx[k] + wx[1] * g.dx[k + 1] + wx[2] * g.dx[k + 2] + wx[3] * g.dx[k + 3];
      ty[i * W + c] = wx[0] * g.dy[k] + wx[1] * g.dy[k + 1] + wx[2] * g.dy[k + 2] + wx[3] * g.dy[k + 3];
    }
  }
  for (int r = 0; r < height; ++r) {
    const auto& wy = ry.w[r];
    const double* x0 = &tx[ry.base[r] * W];
    const double* y0 = &ty[ry.base[r] * W];
    for (int c = 0; c < width; ++c) {
      const std::size_t k = out.index(r, c);
      out.dx[k] += wy[0] * x0[c] + wy[1] * x0[c + W] + wy[2] * x0[c + 2 * W] + wy[3] * x0[c + 3 * W];
      out.dy[k] += wy[0] * y0[c] + wy[1] * y0[c + W] + wy[2] * y0[c + 2 * W] + wy[3] * y0[c + 3 * W];
    }
  }
}

double pixel_or_zero(const ImageFrame& img, int r, int c, int ch) {
  if (r < 0 || c < 0 || r >= img.height() || c >= img.width()) return 0.0;
  return img.at(r, c, ch);
}

// Bilinear sample with zero outside; optionally the spatial derivatives.
double sample(const ImageFrame& img, double y, double x, int ch, double* dy = nullptr,
              double* dx = nullptr) {
  const double fy0 = std::floor(y), fx0 = std::floor(x);
  const int y0 = static_cast<int>(fy0), x0 = static_cast<int>(fx0);
  const double fy = y - fy0, fx = x - fx0;
  double p00, p01, p10, p11;
  if (y0 >= 0 && x0 >= 0 && y0 + 1 < img.height() && x0 + 1 < img.width()) {
    const std::size_t C = static_cast<std::size_t>(img.channels());
    const double* q = img.data().data() + (static_cast<std::size_t>(y0) * img.width() + x0) * C + ch;
    const std::size_t down = static_cast<std::size_t>(img.width()) * C;
    p00 = q[0];
    p01 = q[C];
    p10 = q[down];
    p11 = q[down + C];
  } else {
    p00 = pixel_or_zero(img, y0, x0, ch);
    p01 = pixel_or_zero(img, y0, x0 + 1, ch);
    p10 = pixel_or_zero(img, y0 + 1, x0, ch);
    p11 = pixel_or_zero(img, y0 + 1, x0 + 1, ch);
  }
  if (dy) *dy = (1.0 - fx) * (p10 - p00) + fx * (p11 - p01);
  if (dx) *dx = (1.0 - fy) * (p01 - p00) + fy * (p11 - p10);
  return (1.0 - fy) * ((1.0 - fx) * p00 + fx * p01) + fy * ((1.0 - fx) * p10 + fx * p11);
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

DisplacementField DisplacementField::zeros(int height, int width) {
  DisplacementField f;
  f.height = height;
  f.width = width;
  f.dx.assign(static_cast<std::size_t>(height) * width, 0.0);
  f.dy.assign(static_cast<std::size_t>(height) * width, 0.0);
  return f;
}

ControlGrid ControlGrid::zeros(int canvas_height, int canvas_width, double spacing) {
  if (!(spacing > 0.0)) throw Error(ErrorKind::Config, "control spacing must be > 0");
  ControlGrid g;
  g.spacing = spacing;
  g.rows = static_cast<int>(std::floor((canvas_height - 1) / spacing)) + 4;
  g.cols = static_cast<int>(std::floor((canvas_width - 1) / spacing)) + 4;
  g.dx.assign(static_cast<std::size_t>(g.rows) * g.cols, 0.0);
  g.dy.assign(static_cast<std::size_t>(g.rows) * g.cols, 0.0);
  return g;
}

FfdTransform::FfdTransform(int canvas_height, int canvas_width,
                           const std::array<double, kLevels>& spacings)
    : height_(canvas_height), width_(canvas_width) {
  for (int l = 0; l < kLevels; ++l) {
    levels_[l] = ControlGrid::zeros(canvas_height, canvas_width, spacings[l]);
  }
}

DisplacementField FfdTransform::field() const {
  DisplacementField f = DisplacementField::zeros(height_, width_);
  for (const auto& g : levels_) add_level_field(g, height_, width_, f);
  return f;
}

DisplacementField FfdTransform::level_field(int l) const {
  DisplacementField f = DisplacementField::zeros(height_, width_);
  add_level_field(levels_[l], height_, width_, f);
  return f;
}

double FfdTransform::max_control_displacement() const {
  double m = 0.0;
  for (const auto& g : levels_) {
    for (std::size_t k = 0; k < g.size(); ++k) m = std::max(m, std::hypot(g.dx[k], g.dy[k]));
  }
  return m;
}

ImageFrame warp(const ImageFrame& image, const DisplacementField& field) {
  if (field.height != image.height() || field.width != image.width()) {
    throw Error(ErrorKind::InvalidInput, "warp: field and image canvas differ");
  }
  ImageFrame out(image.height(), image.width(), image.channels(), image.timestamp());
  for (int r = 0; r < image.height(); ++r) {
    for (int c = 0; c < image.width(); ++c) {
      const std::size_t k = field.index(r, c);
      const double y = r + field.dy[k], x = c + field.dx[k];
      for (int ch = 0; ch < image.channels(); ++ch) {
        out.at(r, c, ch) = std::clamp(sample(image, y, x, ch), 0.0, 1.0);
      }
    }
  }
  return out;
}

ImageFrame warp(const ImageFrame& image, const FfdTransform& transform) {
  return warp(image, transform.field());
}

DisplacementField invert_field(const DisplacementField& field, int iterations) {
  // Interpolate the field components as images (unbounded values).
  auto interp = [&](const std::vector<double>& comp, double y, double x) {
    y = std::clamp(y, 0.0, field.height - 1.0);
    x = std::clamp(x, 0.0, field.width - 1.0);
    const int y0 = std::min(static_cast<int>(y), field.height - 2 < 0 ? 0 : field.height - 2);
    const int x0 = std::min(static_cast<int>(x), field.width - 2 < 0 ? 0 : field.width - 2);
    const int y1 = std::min(y0 + 1, field.height - 1), x1 = std::min(x0 + 1, field.width - 1);
    const double fy = y - y0, fx = x - x0;
    auto at = [&](int r, int c) { return comp[field.index(r, c)]; };
    return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
           fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
  };
  DisplacementField inv = DisplacementField::zeros(field.height, field.width);
  for (std::size_t k = 0; k < inv.dx.size(); ++k) {
    inv.dx[k] = -field.dx[k];
    inv.dy[k] = -field.dy[k];
  }
  for (int it = 0; it < iterations; ++it) {
    for (int r = 0; r < field.height; ++r) {
      for (int c = 0; c < field.width; ++c) {
        const std::size_t k = inv.index(r, c);
        const double y = r + inv.dy[k], x = c + inv.dx[k];
        inv.dx[k] = -interp(field.dx, y, x);
        inv.dy[k] = -interp(field.dy, y, x);
      }
    }
  }
  return inv;
}

void AlignmentConfig::validate() const {
  if (!(w >= 0.0)) throw Error(ErrorKind::Config, "alignment weight w must be >= 0");
  for (int l = 0; l < kLevels; ++l) {
    if (!(spacings[l] > 0.0) || !(step_px[l] > 0.0) || max_iterations[l] < 0) {
      throw Error(ErrorKind::Config, "alignment level settings must be positive");
    }
  }
}

namespace {

void laplacian_into(const double* v, double* out, int height, int width) {
  auto edge = [&](int r, int c) {
    const std::size_t k = static_cast<std::size_t>(r) * width + c;
    double s = 0.0;
    if (r > 0) s += v[k - width] - v[k];
    if (r + 1 < height) s += v[k + width] - v[k];
    if (c > 0) s += v[k - 1] - v[k];
    if (c + 1 < width) s += v[k + 1] - v[k];
    out[k] = s;
  };
  for (int c = 0; c < width; ++c) {
    edge(0, c);
    if (height > 1) edge(height - 1, c);
  }
  for (int r = 1; r + 1 < height; ++r) {
    edge(r, 0);
    if (width > 1) edge(r, width - 1);
    const double* up = v + static_cast<std::size_t>(r - 1) * width;
    const double* mid = up + width;
    const double* dn = mid + width;
    double* o = out + static_cast<std::size_t>(r) * width;
    for (int c = 1; c + 1 < width; ++c) o[c] = up[c] + dn[c] + mid[c - 1] + mid[c + 1] - 4.0 * mid[c];
  }
}

}  // namespace

std::vector<double> laplacian(std::span<const double> v, int height, int width) {
  std::vector<double> out(v.size(), 0.0);
  laplacian_into(v.data(), out.data(), height, width);
  return out;
}

void solve_correction(std::span<const double> b, double w, IntensityCorrection& corr,
                      int max_iterations, double tolerance) {
  const std::size_t n = b.size();
  if (corr.v.size() != n) corr.v.assign(n, 0.0);
  if (w == 0.0) {
    std::copy(b.begin(), b.end(), corr.v.begin());
    return;
  }
  // A = I + w L^T L, L symmetric.
  std::vector<double> lx(n), ap(n);
  auto apply = [&](const std::vector<double>& x, std::vector<double>& out) {
    laplacian_into(x.data(), lx.data(), corr.height, corr.width);
    laplacian_into(lx.data(), out.data(), corr.height, corr.width);
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + w * out[i];
  };
  std::vector<double>& x = corr.v;
  std::vector<double> r(n), p(n);
  apply(x, ap);
  const std::vector<double>& ax = ap;
  double bnorm = 0.0, rr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    r[i] = b[i] - ax[i];
    p[i] = r[i];
    rr += r[i] * r[i];
    bnorm += b[i] * b[i];
  }
  const double stop = tolerance * tolerance * std::max(bnorm, 1e-300);
  for (int it = 0; it < max_iterations && rr > stop; ++it) {
    apply(p, ap);
    double pap = 0.0;
    for (std::size_t i = 0; i < n; ++i) pap += p[i] * ap[i];
    if (!(pap > 0.0)) break;
    const double alpha = rr / pap;
    double rr_new = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
      rr_new += r[i] * r[i];
    }
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
  }
}

namespace {

// Energy with control gradients for `grad_level` only (-1 = every level).
// `fixed` (optional) holds the summed field of every level except grad_level.
EnergyResult energy_impl(const ImageFrame& reference, const ImageFrame& moving,
                         const FfdTransform& transform, const IntensityCorrection& corr,
                         double w, bool with_gradients, int grad_level,
                         const DisplacementField* fixed = nullptr) {
  const int h = reference.height(), wd = reference.width();
  if (reference.channels() != 1 || moving.channels() != 1) {
    throw Error(ErrorKind::InvalidInput, "energy: single-channel images expected");
  }
  if (moving.height() != h || moving.width() != wd || transform.height() != h ||
      transform.width() != wd || corr.height != h || corr.width != wd ||
      corr.v.size() != reference.pixel_count()) {
    throw Error(ErrorKind::InvalidInput, "energy: shapes disagree");
  }
  DisplacementField field;
  if (fixed && grad_level >= 0) {
    field = *fixed;
    add_level_field(transform.level(grad_level), h, wd, field);
  } else {
    field = transform.field();
  }
  const std::size_t n = reference.pixel_count();
  std::vector<double> res(n), gy(with_gradients ? n : 0), gx(with_gradients ? n : 0);
  EnergyResult out;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < wd; ++c) {
      const std::size_t k = field.index(r, c);
      double dy = 0.0, dx = 0.0;
      const double wv = with_gradients
                            ? sample(moving, r + field.dy[k], c + field.dx[k], 0, &dy, &dx)
                            : sample(moving, r + field.dy[k], c + field.dx[k], 0);
      res[k] = reference.at(r, c) - wv - corr.v[k];
      out.data_term += res[k] * res[k];
      if (with_gradients) {
        gy[k] = dy;
        gx[k] = dx;
      }
    }
  }
  const std::vector<double> lv = laplacian(corr.v, h, wd);
  for (double x : lv) out.penalty_term += x * x;
  out.energy = out.data_term + w * out.penalty_term;
  if (!with_gradients) return out;

  // dE/dv = -2 res + 2 w L^T L v
  const std::vector<double> llv = laplacian(lv, h, wd);
  out.grad_v.resize(n);
  for (std::size_t k = 0; k < n; ++k) out.grad_v[k] = -2.0 * res[k] + 2.0 * w * llv[k];

  // dE/d(displacement) per pixel, then scatter through the B-spline weights
  std::vector<double> ex(n), ey(n);
  for (std::size_t k = 0; k < n; ++k) {
    ex[k] = -2.0 * res[k] * gx[k];
    ey[k] = -2.0 * res[k] * gy[k];
  }
  for (int l = 0; l < kLevels; ++l) {
    if (grad_level >= 0 && l != grad_level) continue;
    const ControlGrid& g = transform.level(l);
    auto& ox = out.grad_dx[l];
    auto& oy = out.grad_dy[l];
    ox.assign(g.size(), 0.0);
    oy.assign(g.size(), 0.0);
    const AxisWeights ry = axis_weights(h, g.spacing);
    const AxisWeights cx = axis_weights(wd, g.spacing);
    // transpose of the separable field evaluation
    const std::size_t W = static_cast<std::size_t>(wd);
    std::vector<double> sx(static_cast<std::size_t>(g.rows) * W, 0.0), sy(sx.size(), 0.0);
    for (int r = 0; r < h; ++r) {
      const std::size_t k0 = field.index(r, 0);
      for (int a = 0; a < 4; ++a) {
        const double wa = ry.w[r][a];
        double* px = &sx[(ry.base[r] + a) * W];
        double* py = &sy[(ry.base[r] + a) * W];
        for (int c = 0; c < wd; ++c) {
          px[c] += wa * ex[k0 + c];
          py[c] += wa * ey[k0 + c];
        }
      }
    }
    for (int i = 0; i < g.rows; ++i) {
      const std::size_t row = static_cast<std::size_t>(i) * g.cols;
      for (int c = 0; c < wd; ++c) {
        const double vx = sx[i * W + c], vy = sy[i * W + c];
        for (int b = 0; b < 4; ++b) {
          ox[row + cx.base[c] + b] += cx.w[c][b] * vx;
          oy[row + cx.base[c] + b] += cx.w[c][b] * vy;
        }
      }
    }
  }
  return out;
}

}  // namespace

EnergyResult energy(const ImageFrame& reference, const ImageFrame& moving,
                    const FfdTransform& transform, const IntensityCorrection& corr,
                    double w, bool with_gradients) {
  return energy_impl(reference, moving, transform, corr, w, with_gradients, -1);
}

namespace {

ImageFrame estimation_image(const ImageFrame& img, int channel) {
  if (img.channels() == 1) return img;
  return img.channel(channel);
}

}  // namespace

AlignmentResult align_from(const ImageFrame& reference, const ImageFrame& moving,
                           FfdTransform initial, const AlignmentConfig& config,
                           int estimation_channel) {
  config.validate();
  if (reference.height() != moving.height() || reference.width() != moving.width()) {
    throw Error(ErrorKind::InvalidInput, "align: reference and moving canvases differ");
  }
  const ImageFrame R = estimation_image(reference, estimation_channel);
  const ImageFrame J = estimation_image(moving, estimation_channel);
  const int h = R.height(), wd = R.width();

  AlignmentResult out;
  out.transform = std::move(initial);
  out.correction = {h, wd, std::vector<double>(R.pixel_count(), 0.0)};
  FfdTransform& T = out.transform;
  IntensityCorrection& v = out.correction;

  auto fail = [&](const std::string& why) {
    std::string msg = "align: " + why + "; energy trace:";
    for (double e : out.energy_trace) msg += " " + std::to_string(e);
    throw Error(ErrorKind::AlignmentFailed, msg);
  };

  auto v_step = [&]() {
    const ImageFrame W = warp(J, T);
    std::vector<double> b(R.pixel_count());
    for (std::size_t k = 0; k < b.size(); ++k) b[k] = R.data()[k] - W.data()[k];
    solve_correction(b, config.w, v, config.cg_iterations, config.cg_tolerance);
  };

  double E = energy(R, J, T, v, config.w, false).energy;
  if (!finite(E)) fail("non-finite initial energy");
  v_step();
  E = energy(R, J, T, v, config.w, false).energy;
  out.energy_trace.push_back(E);
  out.trace_level.push_back(0);

  for (int l = 0; l < kLevels; ++l) {
    DisplacementField others = DisplacementField::zeros(h, wd);
    for (int o = 0; o < kLevels; ++o) {
      if (o != l) add_level_field(T.level(o), h, wd, others);
    }
    auto level_energy = [&](bool grads) {
      return energy_impl(R, J, T, v, config.w, grads, l, &others);
    };
    auto level_v_step = [&]() {
      DisplacementField f = others;
      add_level_field(T.level(l), h, wd, f);
      const ImageFrame W = warp(J, f);
      std::vector<double> b(R.pixel_count());
      for (std::size_t k = 0; k < b.size(); ++k) b[k] = R.data()[k] - W.data()[k];
      solve_correction(b, config.w, v, config.cg_iterations, config.cg_tolerance);
    };
    double step = config.step_px[l];
    for (int it = 0; it < config.max_iterations[l]; ++it) {
      const EnergyResult er = level_energy(true);
      const auto& gxl = er.grad_dx[l];
      const auto& gyl = er.grad_dy[l];
      double gmax = 0.0, gnorm2 = 0.0;
      for (std::size_t k = 0; k < gxl.size(); ++k) {
        gmax = std::max({gmax, std::abs(gxl[k]), std::abs(gyl[k])});
        gnorm2 += gxl[k] * gxl[k] + gyl[k] * gyl[k];
      }
      if (!finite(gnorm2)) fail("non-finite gradient");
      if (gmax == 0.0) break;

      ControlGrid& g = T.level(l);
      const ControlGrid saved = g;
      bool accepted = false;
      double E_new = E;
      for (int bt = 0; bt < config.max_backtracks; ++bt) {
        const double alpha = step / gmax;
        for (std::size_t k = 0; k < g.size(); ++k) {
          g.dx[k] = saved.dx[k] - alpha * gxl[k];
          g.dy[k] = saved.dy[k] - alpha * gyl[k];
        }
        E_new = level_energy(false).energy;
        if (finite(E_new) && E_new <= E - config.armijo * alpha * gnorm2) {
          accepted = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) {
        g = saved;
        break;
      }
      const double E_before = E;
      E = E_new;
      out.energy_trace.push_back(E);
      out.trace_level.push_back(l);
      const std::vector<double> v_saved = v.v;
      level_v_step();
      const double E_v = level_energy(false).energy;
      if (!finite(E_v)) fail("non-finite energy after correction update");
      if (E_v <= E) {
        E = E_v;
        out.energy_trace.push_back(E);
        out.trace_level.push_back(l);
      } else {
        v.v = v_saved;
      }
      step = std::min(step * 1.5, 4.0 * config.step_px[l]);
      if (E_before - E <= config.tolerance * std::max(E_before, 1e-300)) break;
    }
  }
  out.aligned = warp(moving, T);
  return out;
}

AlignmentResult align(const ImageFrame& reference, const ImageFrame& moving,
                      const AlignmentConfig& config, int estimation_channel) {
  return align_from(reference, moving,
                    FfdTransform(reference.height(), reference.width(), config.spacings),
                    config, estimation_channel);
}

}  // namespace nailforce::align
