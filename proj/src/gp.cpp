#include "nailforce/gp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace nailforce::gp {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double kernel_value(double d, const GpHyperparams& hp) {
  return hp.sigma_f2 * std::exp(-d / (2.0 * hp.length_scale * hp.length_scale));
}

Eigen::LLT<Matrix> cholesky_or_throw(const Matrix& a, const char* what) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorKind::Numerical, std::string(what) + ": matrix not positive definite");
  }
  return llt;
}

}  // namespace

std::array<double, 3> GpHyperparams::to_log() const {
  return {std::log(sigma_f2), std::log(length_scale), std::log(sigma_n2)};
}

GpHyperparams GpHyperparams::from_log(const std::array<double, 3>& p) {
  return {std::exp(p[0]), std::exp(p[1]), std::exp(p[2])};
}

void GpHyperparams::validate() const {
  if (!(sigma_f2 > 0) || !(length_scale > 0) || !(sigma_n2 > 0)) {
    throw Error(ErrorKind::InvalidInput, "GP hyperparameters must be strictly positive");
  }
}

double se_kernel(std::span<const double> x, std::span<const double> x2, const GpHyperparams& hp,
                 KernelDistance distance) {
  if (x.size() != x2.size()) {
    throw Error(ErrorKind::InvalidInput, "se_kernel: dimension mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - x2[i]) * (x[i] - x2[i]);
  return kernel_value(distance == KernelDistance::Squared ? s : std::sqrt(s), hp);
}

Matrix pairwise_distance(const Matrix& a, const Matrix& b, KernelDistance distance) {
  if (a.cols() != b.cols()) {
    throw Error(ErrorKind::InvalidInput, "pairwise_distance: dimension mismatch");
  }
  Matrix d(a.rows(), b.rows());
  if (a.cols() <= 32) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      for (Eigen::Index j = 0; j < b.rows(); ++j) d(i, j) = (a.row(i) - b.row(j)).squaredNorm();
    }
  } else {
    const Vector na = a.rowwise().squaredNorm();
    const Vector nb = b.rowwise().squaredNorm();
    d.noalias() = -2.0 * a * b.transpose();
    d.colwise() += na;
    d.rowwise() += nb.transpose();
    d = d.cwiseMax(0.0);
  }
  if (distance == KernelDistance::AsPrinted) d = d.cwiseSqrt();
  return d;
}

Matrix kernel_from_distance(const Matrix& d, const GpHyperparams& hp) {
  const double s = -1.0 / (2.0 * hp.length_scale * hp.length_scale);
  return hp.sigma_f2 * (d.array() * s).exp().matrix();
}

Likelihood exact_log_likelihood(const Matrix& distances, const Vector& y, const GpHyperparams& hp,
                                bool with_gradient) {
  const Eigen::Index n = y.size();
  if (distances.rows() != n || distances.cols() != n) {
    throw Error(ErrorKind::InvalidInput, "exact_log_likelihood: shape mismatch");
  }
  const Matrix K = kernel_from_distance(distances, hp);
  Matrix Ky = K;
  const double jitter = kJitter * hp.sigma_f2;
  Ky.diagonal().array() += hp.sigma_n2 + jitter;
  const Eigen::LLT<Matrix> llt = cholesky_or_throw(Ky, "exact GP");
  const Vector alpha = llt.solve(y);
  const Matrix& L = llt.matrixLLT();
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) logdet += 2.0 * std::log(L(i, i));
  Likelihood out;
  out.value = -0.5 * y.dot(alpha) - 0.5 * logdet - 0.5 * n * kLog2Pi;
  if (!with_gradient) return out;

  // 1/2 tr((alpha alpha^T - Ky^-1) dKy/dtheta)
  Matrix W = llt.solve(Matrix::Identity(n, n));
  W = alpha * alpha.transpose() - W;
  const double l2 = hp.length_scale * hp.length_scale;
  const double trW = W.trace();
  out.gradient[0] = 0.5 * ((W.array() * K.array()).sum() + jitter * trW);
  out.gradient[1] = 0.5 * (W.array() * K.array() * distances.array()).sum() / l2;
  out.gradient[2] = 0.5 * hp.sigma_n2 * trW;
  return out;
}

namespace {

struct FitcFactors {
  Eigen::LLT<Matrix> luu;
  Eigen::LLT<Matrix> la;
  Matrix V;        // Luu^-1 Kuf
  Vector lambda;   // diag(Kff - Qff) + noise
  Vector beta;     // La^-1 V Lambda^-1 y
  double value = 0.0;
};

// The jitter acts as a nugget on each training input, so it also enters K_uf
// where an inducing point is that training row.
FitcFactors fitc_factors(const Matrix& d_uf, const Matrix& d_uu, const Vector& y,
                         const GpHyperparams& hp, std::span<const int> inducing) {
  const Eigen::Index m = d_uu.rows();
  const Eigen::Index n = d_uf.cols();
  const double jitter = kJitter * hp.sigma_f2;
  Matrix Kuu = kernel_from_distance(d_uu, hp);
  Kuu.diagonal().array() += jitter;
  FitcFactors f;
  f.luu = cholesky_or_throw(Kuu, "FITC Kuu");
  Matrix Kuf = kernel_from_distance(d_uf, hp);
  for (std::size_t i = 0; i < inducing.size(); ++i) {
    Kuf(static_cast<Eigen::Index>(i), inducing[i]) += jitter;
  }
  f.V = f.luu.matrixL().solve(Kuf);
  f.lambda = (hp.sigma_f2 + hp.sigma_n2 + jitter) - f.V.colwise().squaredNorm().transpose().array();
  f.lambda = f.lambda.cwiseMax(1e-300);
  const Vector inv_lambda = f.lambda.cwiseInverse();
  Matrix A = Matrix::Identity(m, m);
  A.noalias() += f.V * inv_lambda.asDiagonal() * f.V.transpose();
  f.la = cholesky_or_throw(A, "FITC A");
  f.beta = f.la.matrixL().solve(f.V * inv_lambda.cwiseProduct(y));
  const Matrix& La = f.la.matrixLLT();
  double logdet = f.lambda.array().log().sum();
  for (Eigen::Index i = 0; i < m; ++i) logdet += 2.0 * std::log(La(i, i));
  const double quad = y.cwiseProduct(inv_lambda).dot(y) - f.beta.squaredNorm();
  f.value = -0.5 * quad - 0.5 * logdet - 0.5 * n * kLog2Pi;
  return f;
}

// iRprop- ascent on the three log hyperparameters; keeps the best point.
template <typename Objective>
std::array<double, 3> rprop_maximize(const Objective& objective, std::array<double, 3> start,
                                     const OptimizerConfig& cfg, double& best_value) {
  const double min_log_noise = std::log(cfg.min_noise);
  auto clamp_params = [&](std::array<double, 3>& p) {
    for (double& v : p) v = std::clamp(v, cfg.min_log_param, cfg.max_log_param);
    p[2] = std::max(p[2], min_log_noise);
  };
  clamp_params(start);
  std::array<double, 3> p = start;
  std::array<double, 3> step{0.1, 0.1, 0.1};
  std::array<double, 3> prev_g{0, 0, 0};
  std::array<double, 3> best = p;
  best_value = -std::numeric_limits<double>::infinity();
  for (int it = 0; it <= cfg.max_iterations; ++it) {
    Likelihood lk;
    try {
      lk = objective(p);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numerical || it == 0) throw;
      // back off toward the best point
      for (int k = 0; k < 3; ++k) {
        step[k] *= 0.5;
        p[k] = 0.5 * (p[k] + best[k]);
      }
      continue;
    }
    if (!std::isfinite(lk.value)) break;
    if (lk.value > best_value) {
      best_value = lk.value;
      best = p;
    }
    if (it == cfg.max_iterations) break;
    double gmax = 0.0;
    for (double g : lk.gradient) gmax = std::max(gmax, std::abs(g));
    if (gmax < 1e-9 * std::max(1.0, std::abs(lk.value))) break;
    bool moved = false;
    for (int k = 0; k < 3; ++k) {
      double g = lk.gradient[k];
      if (g * prev_g[k] > 0) {
        step[k] = std::min(step[k] * 1.2, 1.0);
      } else if (g * prev_g[k] < 0) {
        step[k] = std::max(step[k] * 0.5, 1e-8);
        g = 0.0;
      }
      prev_g[k] = g;
      if (g > 0) {
        p[k] += step[k];
        moved = true;
      } else if (g < 0) {
        p[k] -= step[k];
        moved = true;
      }
    }
    clamp_params(p);
    if (!moved) continue;
    if (*std::max_element(step.begin(), step.end()) < 1e-7) break;
  }
  return best;
}

// BFGS ascent with Armijo backtracking, projected onto the parameter box.
template <typename Objective>
std::array<double, 3> bfgs_maximize(const Objective& objective, std::array<double, 3> start,
                                    const OptimizerConfig& cfg, double& best_value) {
  using V3 = Eigen::Vector3d;
  const double min_log_noise = std::log(cfg.min_noise);
  auto project = [&](V3 p) {
    for (int k = 0; k < 3; ++k) p[k] = std::clamp(p[k], cfg.min_log_param, cfg.max_log_param);
    p[2] = std::max(p[2], min_log_noise);
    return p;
  };
  auto eval = [&](const V3& p, double& f, V3& g) {
    const Likelihood lk = objective({p[0], p[1], p[2]});
    f = -lk.value;
    for (int k = 0; k < 3; ++k) g[k] = -lk.gradient[k];
    return std::isfinite(f) && g.allFinite();
  };
  V3 x = project(V3(start[0], start[1], start[2]));
  double f = 0.0;
  V3 g;
  if (!eval(x, f, g)) throw Error(ErrorKind::Numerical, "GP likelihood not finite at the start point");
  best_value = -f;
  Eigen::Matrix3d H = Eigen::Matrix3d::Identity() * std::min(1.0, 1.0 / std::max(g.cwiseAbs().maxCoeff(), 1e-300));
  for (int it = 0; it < cfg.max_iterations; ++it) {
    if (g.cwiseAbs().maxCoeff() < 1e-9 * std::max(1.0, std::abs(f))) break;
    V3 d = -H * g;
    if (g.dot(d) >= 0.0) {
      H = Eigen::Matrix3d::Identity() * std::min(1.0, 1.0 / g.cwiseAbs().maxCoeff());
      d = -H * g;
    }
    const double dmax = d.cwiseAbs().maxCoeff();
    if (dmax > 2.0) d *= 2.0 / dmax;  // at most a factor e^2 per step
    bool accepted = false;
    V3 x_new, g_new;
    double f_new = 0.0;
    for (double t = 1.0; t > 1e-10; t *= 0.5) {
      x_new = project(x + t * d);
      bool ok = false;
      try {
        ok = eval(x_new, f_new, g_new);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::Numerical) throw;
      }
      if (ok && f_new <= f + 1e-4 * g.dot(x_new - x)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    const V3 s = x_new - x, yv = g_new - g;
    const double gain = f - f_new;
    x = x_new;
    f = f_new;
    g = g_new;
    best_value = -f;
    if (s.cwiseAbs().maxCoeff() < 1e-6 || gain < 1e-10 * std::max(1.0, std::abs(f))) break;
    const double sy = s.dot(yv);
    if (sy > 1e-12) {
      const double rho = 1.0 / sy;
      const Eigen::Matrix3d I = Eigen::Matrix3d::Identity();
      H = (I - rho * s * yv.transpose()) * H * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
  }
  return {x[0], x[1], x[2]};
}

template <typename Objective>
std::array<double, 3> optimize_with_restarts(const Objective& objective, const GpHyperparams& init,
                                             const OptimizerConfig& cfg, double& best_value) {
  init.validate();
  Rng rng = derive_rng(cfg.seed, 0x6770);
  std::normal_distribution<double> jitter(0.0, 1.0);
  std::array<double, 3> best{};
  best_value = -std::numeric_limits<double>::infinity();
  const int restarts = std::max(cfg.restarts, 1);
  for (int r = 0; r < restarts; ++r) {
    std::array<double, 3> start = init.to_log();
    if (r > 0) {
      for (double& v : start) v += jitter(rng);
    }
    double value = 0.0;
    std::array<double, 3> p;
    try {
      p = cfg.method == OptimizerMethod::Bfgs ? bfgs_maximize(objective, start, cfg, value)
                                              : rprop_maximize(objective, start, cfg, value);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numerical || r == 0) throw;
      continue;
    }
    if (value > best_value) {
      best_value = value;
      best = p;
    }
  }
  return best;
}

}  // namespace

double fitc_log_likelihood(const Matrix& d_uf, const Matrix& d_uu, const Vector& y,
                           const GpHyperparams& hp, std::span<const int> inducing) {
  if (!inducing.empty() && static_cast<Eigen::Index>(inducing.size()) != d_uu.rows()) {
    throw Error(ErrorKind::InvalidInput, "fitc_log_likelihood: inducing index count mismatch");
  }
  return fitc_factors(d_uf, d_uu, y, hp, inducing).value;
}

GpModel GpModel::exact(std::shared_ptr<const Matrix> X, const Vector& y, const GpHyperparams& hp,
                       KernelDistance distance) {
  hp.validate();
  if (!X || X->rows() != y.size() || X->rows() < 1) {
    throw Error(ErrorKind::InvalidInput, "GpModel::exact: need N >= 1 rows matching y");
  }
  const Matrix d = pairwise_distance(*X, *X, distance);
  Matrix Ky = kernel_from_distance(d, hp);
  Ky.diagonal().array() += hp.sigma_n2 + kJitter * hp.sigma_f2;
  const Eigen::LLT<Matrix> llt = cholesky_or_throw(Ky, "exact GP");
  GpModel m;
  m.mode_ = Mode::Exact;
  m.distance_ = distance;
  m.hp_ = hp;
  m.basis_ = std::move(X);
  m.weights_ = llt.solve(y);
  m.factor_ = llt.matrixL();
  const Matrix& L = m.factor_;
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < L.rows(); ++i) logdet += 2.0 * std::log(L(i, i));
  m.log_likelihood_ = -0.5 * y.dot(m.weights_) - 0.5 * logdet - 0.5 * y.size() * kLog2Pi;
  return m;
}

GpModel GpModel::fitc(const Matrix& X, const Vector& y, std::vector<int> inducing,
                      const GpHyperparams& hp, KernelDistance distance) {
  hp.validate();
  if (inducing.empty() || X.rows() != y.size()) {
    throw Error(ErrorKind::InvalidInput, "GpModel::fitc: empty inducing set or shape mismatch");
  }
  auto Xu = std::make_shared<Matrix>(static_cast<Eigen::Index>(inducing.size()), X.cols());
  for (std::size_t i = 0; i < inducing.size(); ++i) {
    if (inducing[i] < 0 || inducing[i] >= X.rows()) {
      throw Error(ErrorKind::InvalidInput, "GpModel::fitc: inducing index out of range");
    }
    Xu->row(static_cast<Eigen::Index>(i)) = X.row(inducing[i]);
  }
  const Matrix d_uf = pairwise_distance(*Xu, X, distance);
  const Matrix d_uu = pairwise_distance(*Xu, *Xu, distance);
  const FitcFactors f = fitc_factors(d_uf, d_uu, y, hp, inducing);
  GpModel m;
  m.mode_ = Mode::Fitc;
  m.distance_ = distance;
  m.hp_ = hp;
  m.basis_ = std::move(Xu);
  m.inducing_ = std::move(inducing);
  m.factor_ = f.luu.matrixL();
  m.factor2_ = f.la.matrixL();
  const Vector t = f.la.matrixU().solve(f.beta);
  m.weights_ = f.luu.matrixU().solve(t);
  m.log_likelihood_ = f.value;
  return m;
}

Prediction GpModel::predict(std::span<const double> x) const {
  if (static_cast<Eigen::Index>(x.size()) != basis_->cols()) {
    throw Error(ErrorKind::InvalidInput, "GpModel::predict: dimension mismatch");
  }
  Matrix q(1, basis_->cols());
  for (std::size_t i = 0; i < x.size(); ++i) q(0, static_cast<Eigen::Index>(i)) = x[i];
  return predict(q).front();
}

std::vector<Prediction> GpModel::predict(const Matrix& queries) const {
  if (queries.cols() != basis_->cols()) {
    throw Error(ErrorKind::InvalidInput, "GpModel::predict: dimension mismatch");
  }
  // basis x queries cross-kernel
  const Matrix ks = kernel_from_distance(pairwise_distance(*basis_, queries, distance_), hp_);
  const Vector mean = ks.transpose() * weights_;
  const Matrix v = factor_.triangularView<Eigen::Lower>().solve(ks);
  Vector var = Vector::Constant(queries.rows(), hp_.sigma_f2) - v.colwise().squaredNorm().transpose();
  if (mode_ == Mode::Fitc) {
    const Matrix w = factor2_.triangularView<Eigen::Lower>().solve(v);
    var += w.colwise().squaredNorm().transpose();
  }
  std::vector<Prediction> out(static_cast<std::size_t>(queries.rows()));
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    out[static_cast<std::size_t>(i)] = {mean(i), std::clamp(var(i), 0.0, hp_.sigma_f2)};
  }
  return out;
}

GpModel::State GpModel::state() const {
  return {mode_, distance_, hp_, log_likelihood_, *basis_, weights_, factor_, factor2_, inducing_};
}

GpModel GpModel::from_state(State s) {
  GpModel m;
  m.mode_ = s.mode;
  m.distance_ = s.distance;
  m.hp_ = s.hp;
  m.log_likelihood_ = s.log_likelihood;
  m.basis_ = std::make_shared<Matrix>(std::move(s.basis));
  m.weights_ = std::move(s.weights);
  m.factor_ = std::move(s.var_factor);
  m.factor2_ = std::move(s.var_factor2);
  m.inducing_ = std::move(s.inducing);
  if (m.weights_.size() != m.basis_->rows() || m.factor_.rows() != m.basis_->rows()) {
    throw Error(ErrorKind::InvalidInput, "GpModel::from_state: inconsistent shapes");
  }
  return m;
}

GpModel fit_exact(std::shared_ptr<const Matrix> X, const Matrix& distances, const Vector& y,
                  const GpHyperparams& init, const OptimizerConfig& config) {
  if (!X || X->rows() < 1 || X->rows() != y.size()) {
    throw Error(ErrorKind::InvalidInput, "fit_exact: need N >= 1 rows matching y");
  }
  auto objective = [&](const std::array<double, 3>& p) {
    const Likelihood lk = exact_log_likelihood(distances, y, GpHyperparams::from_log(p), true);
    return lk;
  };
  double best_value = 0.0;
  const auto best = optimize_with_restarts(objective, init, config, best_value);
  return GpModel::exact(std::move(X), y, GpHyperparams::from_log(best), config.distance);
}

GpModel fit_exact(std::shared_ptr<const Matrix> X, const Vector& y, const GpHyperparams& init,
                  const OptimizerConfig& config) {
  if (!X) throw Error(ErrorKind::InvalidInput, "fit_exact: null inputs");
  const Matrix d = pairwise_distance(*X, *X, config.distance);
  return fit_exact(std::move(X), d, y, init, config);
}

std::vector<int> select_inducing(int n, int m, Rng& rng) {
  if (m < 1 || m > n) {
    throw Error(ErrorKind::InvalidInput, "inducing set size M must satisfy 1 <= M <= N");
  }
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  // partial Fisher-Yates
  for (int i = 0; i < m; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(m));
  std::sort(idx.begin(), idx.end());
  return idx;
}

GpModel fit_fitc_with(const Matrix& X, const Vector& y, std::vector<int> inducing,
                      const GpHyperparams& init, const OptimizerConfig& config) {
  if (X.rows() != y.size()) throw Error(ErrorKind::InvalidInput, "fit_fitc: shape mismatch");
  Matrix Xu(static_cast<Eigen::Index>(inducing.size()), X.cols());
  for (std::size_t i = 0; i < inducing.size(); ++i) {
    Xu.row(static_cast<Eigen::Index>(i)) = X.row(inducing[i]);
  }
  const Matrix d_uf = pairwise_distance(Xu, X, config.distance);
  const Matrix d_uu = pairwise_distance(Xu, Xu, config.distance);
  // central differences in log space; each evaluation is O(N M^2)
  auto objective = [&](const std::array<double, 3>& p) {
    Likelihood lk;
    lk.value = fitc_factors(d_uf, d_uu, y, GpHyperparams::from_log(p), inducing).value;
    constexpr double h = 1e-5;
    for (int k = 0; k < 3; ++k) {
      auto hi = p, lo = p;
      hi[k] += h;
      lo[k] -= h;
      lk.gradient[k] = (fitc_factors(d_uf, d_uu, y, GpHyperparams::from_log(hi), inducing).value -
                        fitc_factors(d_uf, d_uu, y, GpHyperparams::from_log(lo), inducing).value) /
                       (2.0 * h);
    }
    return lk;
  };
  double best_value = 0.0;
  const auto best = optimize_with_restarts(objective, init, config, best_value);
  return GpModel::fitc(X, y, std::move(inducing), GpHyperparams::from_log(best), config.distance);
}

GpModel fit_fitc(const Matrix& X, const Vector& y, int m, const GpHyperparams& init, Rng& rng,
                 const OptimizerConfig& config) {
  const int n = static_cast<int>(X.rows());
  if (m > n) throw Error(ErrorKind::InvalidInput, "fit_fitc: M > N");
  return fit_fitc_with(X, y, select_inducing(n, m, rng), init, config);
}

GpHyperparams default_hyperparams(const Matrix& X, const Vector& y, KernelDistance distance) {
  std::vector<double> dists;
  const Eigen::Index n = X.rows();
  const Eigen::Index stride = std::max<Eigen::Index>(1, n / 64);
  for (Eigen::Index i = 0; i < n; i += stride) {
    for (Eigen::Index j = i + stride; j < n; j += stride) {
      const double d2 = (X.row(i) - X.row(j)).squaredNorm();
      dists.push_back(distance == KernelDistance::Squared ? d2 : std::sqrt(d2));
    }
  }
  double med = 1.0;
  if (!dists.empty()) {
    std::nth_element(dists.begin(), dists.begin() + static_cast<long>(dists.size() / 2), dists.end());
    med = std::max(dists[dists.size() / 2], 1e-6);
  }
  const double var = y.size() > 1 ? (y.array() - y.mean()).square().mean() : 1.0;
  GpHyperparams hp;
  hp.sigma_f2 = std::max(var, 1e-6);
  hp.length_scale = std::sqrt(med / 2.0);
  hp.sigma_n2 = 0.1 * hp.sigma_f2;
  return hp;
}

}  // namespace nailforce::gp
