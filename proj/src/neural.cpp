#include "nailforce/neural.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace nailforce::nn {

namespace {

using ConstMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const Vector>;
using Map = Eigen::Map<Matrix>;
using VecMap = Eigen::Map<Vector>;

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Gauss-Legendre rule on [-1,1].
struct Quadrature {
  static constexpr int kNodes = 24;
  std::array<double, kNodes> x{};
  std::array<double, kNodes> w{};

  Quadrature() {
    for (int i = 0; i < kNodes; ++i) {
      double z = std::cos(std::numbers::pi * (i + 0.75) / (kNodes + 0.5));
      double dp = 0.0;
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = z;
        for (int k = 2; k <= kNodes; ++k) {
          const double p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
          p0 = p1;
          p1 = p2;
        }
        dp = kNodes * (z * p1 - p0) / (z * z - 1.0);
        const double dz = p1 / dp;
        z -= dz;
        if (std::abs(dz) < 1e-16) break;
      }
      x[i] = z;
      w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
  }
};

const Quadrature& quadrature() {
  static const Quadrature q;
  return q;
}

UnitMoments sigmoid_moments(double mu, double s2) {
  constexpr double lambda2 = std::numbers::pi / 8.0;
  const double lambda = std::sqrt(lambda2);
  UnitMoments m;
  const double D = 1.0 + lambda2 * s2;
  const double k = 1.0 / std::sqrt(D);
  m.nu = sigmoid(mu * k);
  const double ds = m.nu * (1.0 - m.nu);
  m.dnu_dmu = ds * k;
  m.dnu_ds2 = ds * mu * (-0.5 * lambda2 * k / D);

  // Var[Phi(lambda X)] = Phi2(h, h; rho) - Phi(h)^2
  //                    = 1/(2 pi) int_0^{asin rho} exp(-h^2 / (1 + sin t)) dt
  const double h = lambda * mu * k;
  const double rho = lambda2 * s2 / D;
  const double top = std::asin(rho);
  const auto& q = quadrature();
  double i0 = 0.0, i1 = 0.0;
  for (int i = 0; i < Quadrature::kNodes; ++i) {
    const double t = 0.5 * top * (q.x[i] + 1.0);
    const double wt = 0.5 * top * q.w[i];
    const double inv = 1.0 / (1.0 + std::sin(t));
    const double e = std::exp(-h * h * inv);
    i0 += wt * e;
    i1 += wt * (-2.0 * h * inv) * e;
  }
  constexpr double inv2pi = 0.5 / std::numbers::pi;
  m.tau2 = s2 > 0.0 ? i0 * inv2pi : 0.0;
  const double dtau_dh = i1 * inv2pi;
  const double dtau_drho =
      std::exp(-h * h / (1.0 + rho)) * inv2pi / std::sqrt((1.0 - rho) * (1.0 + rho));
  const double dh_dmu = lambda * k;
  const double dh_ds2 = -0.5 * lambda * mu * lambda2 * k / D;
  const double drho_ds2 = lambda2 / (D * D);
  m.dtau2_dmu = dtau_dh * dh_dmu;
  m.dtau2_ds2 = dtau_dh * dh_ds2 + dtau_drho * drho_ds2;
  return m;
}

// Per-unit activation of a moment matrix plus the partials needed for backprop.
struct ActivationCache {
  Matrix nu, tau2, dnu_dmu, dnu_ds2, dtau2_dmu, dtau2_ds2;
};

void activate(const Matrix& am, const Matrix& av, Activation act, ActivationCache& c) {
  if (act == Activation::Identity) {
    c.nu = am;
    c.tau2 = av;
    c.dnu_dmu.setOnes(am.rows(), am.cols());
    c.dnu_ds2.setZero(am.rows(), am.cols());
    c.dtau2_dmu.setZero(am.rows(), am.cols());
    c.dtau2_ds2.setOnes(am.rows(), am.cols());
    return;
  }
  c.nu.resize(am.rows(), am.cols());
  c.tau2.resize(am.rows(), am.cols());
  c.dnu_dmu.resize(am.rows(), am.cols());
  c.dnu_ds2.resize(am.rows(), am.cols());
  c.dtau2_dmu.resize(am.rows(), am.cols());
  c.dtau2_ds2.resize(am.rows(), am.cols());
  for (Eigen::Index i = 0; i < am.size(); ++i) {
    const UnitMoments m = fd_unit_moments(am(i), std::max(av(i), 0.0), act);
    c.nu(i) = m.nu;
    c.tau2(i) = m.tau2;
    c.dnu_dmu(i) = m.dnu_dmu;
    c.dnu_ds2(i) = m.dnu_ds2;
    c.dtau2_dmu(i) = m.dtau2_dmu;
    c.dtau2_ds2(i) = m.dtau2_ds2;
  }
}

// Dropout-layer moments for a batch (columns). U receives the effective input
// second-moment term p S + p(1-p) M^2.
template <typename WType, typename BType>
void dropout_affine(const WType& W, const BType& b, double p, const Matrix& M, const Matrix& S,
                    Matrix& am, Matrix& av, Matrix& U) {
  am.noalias() = p * (W * M);
  am.colwise() += b;
  U = p * S + (p * (1.0 - p)) * M.cwiseProduct(M);
  av.noalias() = W.cwiseProduct(W) * U;
}

// Per-sample loss on output moments; fills dmu, dvar (unscaled).
double output_loss(LossKind kind, const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Vector>& mu,
                   const Eigen::Ref<const Vector>& var, Eigen::Ref<Vector> dmu,
                   Eigen::Ref<Vector> dvar) {
  const Vector e = y - mu;
  const double q = e.squaredNorm() + var.sum();
  if (kind == LossKind::Squared) {
    dmu = -2.0 * e;
    dvar.setOnes();
    return q;
  }
  const double r = std::sqrt(q);
  if (r > 0.0) {
    dmu = -e / r;
    dvar.setConstant(0.5 / r);
  } else {
    dmu.setZero();
    dvar.setZero();
  }
  return r;
}

void glorot(std::span<double> out, int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  for (double& v : out) v = u(rng);
}

}  // namespace

Matrix conv2d(const Matrix& g, const Matrix& w, double b) {
  if (w.rows() > g.rows() || w.cols() > g.cols() || w.size() == 0) {
    throw Error(ErrorKind::InvalidInput, "conv2d: kernel larger than input");
  }
  const Eigen::Index oh = g.rows() - w.rows() + 1, ow = g.cols() - w.cols() + 1;
  Matrix h = Matrix::Constant(oh, ow, b);
  for (Eigen::Index v = 0; v < w.cols(); ++v) {
    for (Eigen::Index u = 0; u < w.rows(); ++u) h += w(u, v) * g.block(u, v, oh, ow);
  }
  return h;
}

Matrix maxpool(const Matrix& h, int r1, int r2, std::vector<Eigen::Index>* argmax) {
  if (r1 < 1 || r2 < 1) throw Error(ErrorKind::InvalidInput, "maxpool: window must be positive");
  const Eigen::Index oh = (h.rows() + r1 - 1) / r1, ow = (h.cols() + r2 - 1) / r2;
  Matrix p(oh, ow);
  if (argmax) argmax->assign(static_cast<std::size_t>(oh * ow), 0);
  for (Eigen::Index n = 0; n < ow; ++n) {
    for (Eigen::Index m = 0; m < oh; ++m) {
      double best = -std::numeric_limits<double>::infinity();
      Eigen::Index arg = -1;
      for (Eigen::Index c = n * r2; c < std::min<Eigen::Index>((n + 1) * r2, h.cols()); ++c) {
        for (Eigen::Index r = m * r1; r < std::min<Eigen::Index>((m + 1) * r1, h.rows()); ++r) {
          if (h(r, c) > best || arg < 0) {
            best = h(r, c);
            arg = c * h.rows() + r;
          }
        }
      }
      p(m, n) = best;
      if (argmax) (*argmax)[static_cast<std::size_t>(n * oh + m)] = arg;
    }
  }
  return p;
}

// ---------------------------------------------------------------- CNN

CnnSpec::Shapes CnnSpec::shapes() const {
  Shapes s{};
  s.c1h = input_height - kernel_size + 1;
  s.c1w = input_width - kernel_size + 1;
  s.p1h = (s.c1h + pool - 1) / pool;
  s.p1w = (s.c1w + pool - 1) / pool;
  s.c2h = s.p1h - kernel_size + 1;
  s.c2w = s.p1w - kernel_size + 1;
  s.p2h = (s.c2h + pool - 1) / pool;
  s.p2w = (s.c2w + pool - 1) / pool;
  s.flat = static_cast<std::size_t>(conv2_kernels) * std::max(s.p2h, 0) * std::max(s.p2w, 0);
  return s;
}

void CnnSpec::validate() const {
  if (kernel_size < 1 || pool < 1 || conv1_kernels < 1 || conv2_kernels < 1 || hidden < 1 ||
      outputs < 1) {
    throw Error(ErrorKind::InvalidInput, "CnnSpec: layer sizes must be positive");
  }
  const Shapes s = shapes();
  if (s.c1h < 1 || s.c1w < 1 || s.c2h < 1 || s.c2w < 1) {
    throw Error(ErrorKind::InvalidInput, "CnnSpec: layer shapes do not chain for this input size");
  }
}

std::size_t CnnSpec::parameter_count() const {
  const std::size_t kk = static_cast<std::size_t>(kernel_size) * kernel_size;
  return conv1_kernels * (kk + 1) + conv2_kernels * (conv1_kernels * kk + 1) +
         hidden * (shapes().flat + 1) + outputs * (hidden + 1);
}

namespace {

struct CnnOffsets {
  std::size_t w1, b1, w2, b2, wh, bh, wo, bo;
};

CnnOffsets cnn_offsets(const CnnSpec& s) {
  const std::size_t kk = static_cast<std::size_t>(s.kernel_size) * s.kernel_size;
  CnnOffsets o{};
  o.w1 = 0;
  o.b1 = o.w1 + s.conv1_kernels * kk;
  o.w2 = o.b1 + s.conv1_kernels;
  o.b2 = o.w2 + static_cast<std::size_t>(s.conv2_kernels) * s.conv1_kernels * kk;
  o.wh = o.b2 + s.conv2_kernels;
  o.bh = o.wh + s.hidden * s.shapes().flat;
  o.wo = o.bh + s.hidden;
  o.bo = o.wo + static_cast<std::size_t>(s.outputs) * s.hidden;
  return o;
}

struct CnnCache {
  std::vector<Matrix> c1, p1, c2, p2;
  std::vector<std::vector<Eigen::Index>> a1, a2;
  Vector z, hid, out;
};

void cnn_forward_cached(const CnnSpec& s, const std::vector<double>& prm, const Matrix& g,
                        CnnCache& c) {
  const CnnOffsets o = cnn_offsets(s);
  const int k = s.kernel_size;
  const std::size_t kk = static_cast<std::size_t>(k) * k;
  c.c1.resize(s.conv1_kernels);
  c.p1.resize(s.conv1_kernels);
  c.a1.resize(s.conv1_kernels);
  for (int i = 0; i < s.conv1_kernels; ++i) {
    const ConstMap w(prm.data() + o.w1 + i * kk, k, k);
    c.c1[i] = conv2d(g, w, prm[o.b1 + i]);
    c.p1[i] = maxpool(c.c1[i], s.pool, s.pool, &c.a1[i]);
  }
  const CnnSpec::Shapes sh = s.shapes();
  c.c2.resize(s.conv2_kernels);
  c.p2.resize(s.conv2_kernels);
  c.a2.resize(s.conv2_kernels);
  for (int j = 0; j < s.conv2_kernels; ++j) {
    Matrix acc = Matrix::Constant(sh.c2h, sh.c2w, prm[o.b2 + j]);
    for (int i = 0; i < s.conv1_kernels; ++i) {
      const ConstMap w(prm.data() + o.w2 + (static_cast<std::size_t>(j) * s.conv1_kernels + i) * kk,
                       k, k);
      acc += conv2d(c.p1[i], w, 0.0);
    }
    c.c2[j] = std::move(acc);
    c.p2[j] = maxpool(c.c2[j], s.pool, s.pool, &c.a2[j]);
  }
  const Eigen::Index per = static_cast<Eigen::Index>(sh.p2h) * sh.p2w;
  c.z.resize(static_cast<Eigen::Index>(sh.flat));
  for (int j = 0; j < s.conv2_kernels; ++j) {
    c.z.segment(j * per, per) = ConstVecMap(c.p2[j].data(), per);
  }
  const ConstMap Wh(prm.data() + o.wh, s.hidden, static_cast<Eigen::Index>(sh.flat));
  const ConstVecMap bh(prm.data() + o.bh, s.hidden);
  c.hid = (Wh * c.z + bh).array().tanh().matrix();
  const ConstMap Wo(prm.data() + o.wo, s.outputs, s.hidden);
  const ConstVecMap bo(prm.data() + o.bo, s.outputs);
  c.out = Wo * c.hid + bo;
}

}  // namespace

Cnn::Cnn(const CnnSpec& spec, Rng& rng) : spec_(spec) {
  spec_.validate();
  params_.assign(spec_.parameter_count(), 0.0);
  const CnnOffsets o = cnn_offsets(spec_);
  const int kk = spec_.kernel_size * spec_.kernel_size;
  std::span<double> all(params_);
  glorot(all.subspan(o.w1, o.b1 - o.w1), kk, kk * spec_.conv1_kernels, rng);
  glorot(all.subspan(o.w2, o.b2 - o.w2), kk * spec_.conv1_kernels, kk * spec_.conv2_kernels, rng);
  glorot(all.subspan(o.wh, o.bh - o.wh), static_cast<int>(spec_.shapes().flat), spec_.hidden, rng);
  glorot(all.subspan(o.wo, o.bo - o.wo), spec_.hidden, spec_.outputs, rng);
}

Cnn::Cnn(const CnnSpec& spec, std::vector<double> params) : spec_(spec), params_(std::move(params)) {
  spec_.validate();
  if (params_.size() != spec_.parameter_count()) {
    throw Error(ErrorKind::InvalidInput, "Cnn: parameter vector has the wrong length");
  }
}

Vector Cnn::forward(const Matrix& image) const {
  if (image.rows() != spec_.input_height || image.cols() != spec_.input_width) {
    throw Error(ErrorKind::InvalidInput, "Cnn::forward: image shape does not match the spec");
  }
  CnnCache c;
  cnn_forward_cached(spec_, params_, image, c);
  return c.out;
}

double Cnn::loss(std::span<const Matrix> images, const Matrix& Y, std::span<const std::size_t> idx,
                 std::vector<double>* grad) const {
  if (idx.empty()) return 0.0;
  const CnnSpec& s = spec_;
  const CnnOffsets o = cnn_offsets(s);
  const CnnSpec::Shapes sh = s.shapes();
  const int k = s.kernel_size;
  const std::size_t kk = static_cast<std::size_t>(k) * k;
  if (grad) grad->assign(params_.size(), 0.0);
  const double scale = 1.0 / static_cast<double>(idx.size());
  double total = 0.0;
  CnnCache c;
  for (std::size_t n : idx) {
    const Matrix& g = images[n];
    if (g.rows() != s.input_height || g.cols() != s.input_width || Y.rows() != s.outputs) {
      throw Error(ErrorKind::InvalidInput, "Cnn::loss: sample shape does not match the spec");
    }
    cnn_forward_cached(s, params_, g, c);
    const Vector e = Y.col(static_cast<Eigen::Index>(n)) - c.out;
    Vector dout;
    if (s.loss == LossKind::Squared) {
      total += e.squaredNorm();
      dout = -2.0 * e;
    } else {
      const double r = e.norm();
      total += r;
      dout = r > 0.0 ? Vector(-e / r) : Vector::Zero(e.size());
    }
    if (!grad) continue;
    dout *= scale;
    double* G = grad->data();
    Map(G + o.wo, s.outputs, s.hidden).noalias() += dout * c.hid.transpose();
    VecMap(G + o.bo, s.outputs) += dout;
    const ConstMap Wo(params_.data() + o.wo, s.outputs, s.hidden);
    const Vector dpre =
        (Wo.transpose() * dout).cwiseProduct((1.0 - c.hid.array().square()).matrix());
    const Eigen::Index flat = static_cast<Eigen::Index>(sh.flat);
    Map(G + o.wh, s.hidden, flat).noalias() += dpre * c.z.transpose();
    VecMap(G + o.bh, s.hidden) += dpre;
    const ConstMap Wh(params_.data() + o.wh, s.hidden, flat);
    const Vector dz = Wh.transpose() * dpre;

    const Eigen::Index per = static_cast<Eigen::Index>(sh.p2h) * sh.p2w;
    std::vector<Matrix> dp1(s.conv1_kernels, Matrix::Zero(sh.p1h, sh.p1w));
    for (int j = 0; j < s.conv2_kernels; ++j) {
      Matrix dc2 = Matrix::Zero(sh.c2h, sh.c2w);
      for (Eigen::Index q = 0; q < per; ++q) dc2(c.a2[j][q]) += dz(j * per + q);
      G[o.b2 + j] += dc2.sum();
      for (int i = 0; i < s.conv1_kernels; ++i) {
        const std::size_t off = o.w2 + (static_cast<std::size_t>(j) * s.conv1_kernels + i) * kk;
        Map dw(G + off, k, k);
        const ConstMap w(params_.data() + off, k, k);
        for (int v = 0; v < k; ++v) {
          for (int u = 0; u < k; ++u) {
            dw(u, v) += dc2.cwiseProduct(c.p1[i].block(u, v, sh.c2h, sh.c2w)).sum();
            dp1[i].block(u, v, sh.c2h, sh.c2w) += w(u, v) * dc2;
          }
        }
      }
    }
    for (int i = 0; i < s.conv1_kernels; ++i) {
      Matrix dc1 = Matrix::Zero(sh.c1h, sh.c1w);
      for (Eigen::Index q = 0; q < dp1[i].size(); ++q) dc1(c.a1[i][q]) += dp1[i](q);
      G[o.b1 + i] += dc1.sum();
      Map dw(G + o.w1 + i * kk, k, k);
      for (int v = 0; v < k; ++v) {
        for (int u = 0; u < k; ++u) dw(u, v) += dc1.cwiseProduct(g.block(u, v, sh.c1h, sh.c1w)).sum();
      }
    }
  }
  return total * scale;
}

// ---------------------------------------------------------- fast dropout

UnitMoments fd_unit_moments(double mu, double s2, Activation activation) {
  if (s2 < 0.0) throw Error(ErrorKind::InvalidInput, "fd_unit_moments: negative variance");
  switch (activation) {
    case Activation::Identity: {
      UnitMoments m;
      m.nu = mu;
      m.tau2 = s2;
      m.dnu_dmu = 1.0;
      m.dtau2_ds2 = 1.0;
      return m;
    }
    case Activation::Sigmoid: {
      UnitMoments m = sigmoid_moments(mu, s2);
      if (s2 == 0.0) m.nu = sigmoid(mu);
      return m;
    }
    case Activation::Tanh: {
      const UnitMoments g = sigmoid_moments(2.0 * mu, 4.0 * s2);
      UnitMoments m;
      m.nu = s2 == 0.0 ? std::tanh(mu) : 2.0 * g.nu - 1.0;
      m.tau2 = 4.0 * g.tau2;
      m.dnu_dmu = 4.0 * g.dnu_dmu;
      m.dnu_ds2 = 8.0 * g.dnu_ds2;
      m.dtau2_dmu = 8.0 * g.dtau2_dmu;
      m.dtau2_ds2 = 16.0 * g.dtau2_ds2;
      return m;
    }
  }
  return {};
}

LayerMoments fd_layer_moments(const Vector& mean, const Vector& var, const Matrix& W,
                              const Vector& b, double keep_prob) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw Error(ErrorKind::InvalidInput, "fd_layer_moments: keep probability must be in (0,1]");
  }
  if (W.cols() != mean.size() || var.size() != mean.size() || b.size() != W.rows()) {
    throw Error(ErrorKind::InvalidInput, "fd_layer_moments: shape mismatch");
  }
  Matrix am, av, U;
  dropout_affine(W, b, keep_prob, Matrix(mean), Matrix(var), am, av, U);
  return {am.col(0), av.col(0)};
}

FdNetSpec FdNetSpec::nn_default(int inputs, int outputs) {
  FdNetSpec s;
  s.inputs = inputs;
  s.layers = {{170, Activation::Tanh, 0.3},
              {120, Activation::Tanh, 0.3},
              {35, Activation::Tanh, 0.3},
              {outputs, Activation::Identity, 0.3}};
  return s;
}

std::size_t FdNetSpec::parameter_count() const {
  std::size_t n = 0;
  int fan_in = inputs;
  for (const auto& l : layers) {
    n += static_cast<std::size_t>(l.units) * (fan_in + 1);
    fan_in = l.units;
  }
  return n;
}

void FdNetSpec::validate() const {
  if (inputs < 1 || layers.empty()) {
    throw Error(ErrorKind::InvalidInput, "FdNetSpec: need inputs and at least one layer");
  }
  for (const auto& l : layers) {
    if (l.units < 1 || !(l.drop_prob >= 0.0 && l.drop_prob < 1.0)) {
      throw Error(ErrorKind::InvalidInput, "FdNetSpec: bad layer width or drop probability");
    }
  }
}

std::vector<double> init_params(const FdNetSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<double> p(spec.parameter_count(), 0.0);
  std::size_t off = 0;
  int fan_in = spec.inputs;
  for (const auto& l : spec.layers) {
    const std::size_t nw = static_cast<std::size_t>(l.units) * fan_in;
    glorot(std::span<double>(p).subspan(off, nw), fan_in, l.units, rng);
    off += nw + l.units;
    fan_in = l.units;
  }
  return p;
}

namespace {

struct FdCache {
  std::vector<Matrix> M, S, U;  // layer inputs and effective second moments
  std::vector<ActivationCache> act;
};

FdOutput fd_forward_cached(const FdNetSpec& spec, std::span<const double> params, const Matrix& X,
                           FdCache* cache) {
  if (params.size() != spec.parameter_count() || X.rows() != spec.inputs) {
    throw Error(ErrorKind::InvalidInput, "fd_forward: shape mismatch");
  }
  Matrix M = X, S = Matrix::Zero(X.rows(), X.cols());
  std::size_t off = 0;
  int fan_in = spec.inputs;
  if (cache) {
    cache->M.clear();
    cache->S.clear();
    cache->U.clear();
    cache->act.clear();
  }
  for (const auto& l : spec.layers) {
    const ConstMap W(params.data() + off, l.units, fan_in);
    const ConstVecMap b(params.data() + off + static_cast<std::size_t>(l.units) * fan_in, l.units);
    Matrix am, av, U;
    dropout_affine(W, b, 1.0 - l.drop_prob, M, S, am, av, U);
    ActivationCache ac;
    activate(am, av, l.activation, ac);
    if (cache) {
      cache->M.push_back(std::move(M));
      cache->S.push_back(std::move(S));
      cache->U.push_back(std::move(U));
    }
    M = ac.nu;
    S = ac.tau2;
    if (cache) cache->act.push_back(std::move(ac));
    off += static_cast<std::size_t>(l.units) * (fan_in + 1);
    fan_in = l.units;
  }
  return {std::move(M), std::move(S)};
}

}  // namespace

FdOutput fd_forward(const FdNetSpec& spec, std::span<const double> params, const Matrix& X) {
  return fd_forward_cached(spec, params, X, nullptr);
}

double fd_loss(const FdNetSpec& spec, std::span<const double> params, const Matrix& X,
               const Matrix& Y, std::span<const std::size_t> idx, std::vector<double>* grad) {
  if (grad) grad->assign(params.size(), 0.0);
  if (idx.empty()) return 0.0;
  Matrix Xb(X.rows(), static_cast<Eigen::Index>(idx.size()));
  Matrix Yb(Y.rows(), Xb.cols());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    Xb.col(static_cast<Eigen::Index>(j)) = X.col(static_cast<Eigen::Index>(idx[j]));
    Yb.col(static_cast<Eigen::Index>(j)) = Y.col(static_cast<Eigen::Index>(idx[j]));
  }
  FdCache cache;
  const FdOutput out = fd_forward_cached(spec, params, Xb, grad ? &cache : nullptr);
  if (Yb.rows() != out.mean.rows()) throw Error(ErrorKind::InvalidInput, "fd_loss: target size");
  const double scale = 1.0 / static_cast<double>(idx.size());
  Matrix dM(out.mean.rows(), out.mean.cols()), dS(out.mean.rows(), out.mean.cols());
  double total = 0.0;
  for (Eigen::Index j = 0; j < Xb.cols(); ++j) {
    total += output_loss(spec.loss, Yb.col(j), out.mean.col(j), out.var.col(j), dM.col(j), dS.col(j));
  }
  if (!grad) return total * scale;
  dM *= scale;
  dS *= scale;

  // layer offsets
  std::vector<std::size_t> offs;
  std::vector<int> fans;
  {
    std::size_t off = 0;
    int fan_in = spec.inputs;
    for (const auto& l : spec.layers) {
      offs.push_back(off);
      fans.push_back(fan_in);
      off += static_cast<std::size_t>(l.units) * (fan_in + 1);
      fan_in = l.units;
    }
  }
  for (int li = static_cast<int>(spec.layers.size()) - 1; li >= 0; --li) {
    const auto& l = spec.layers[li];
    const ActivationCache& ac = cache.act[li];
    const Matrix dAm = dM.cwiseProduct(ac.dnu_dmu) + dS.cwiseProduct(ac.dtau2_dmu);
    const Matrix dAv = dM.cwiseProduct(ac.dnu_ds2) + dS.cwiseProduct(ac.dtau2_ds2);
    const double p = 1.0 - l.drop_prob;
    const ConstMap W(params.data() + offs[li], l.units, fans[li]);
    Map dW(grad->data() + offs[li], l.units, fans[li]);
    VecMap db(grad->data() + offs[li] + static_cast<std::size_t>(l.units) * fans[li], l.units);
    const Matrix& Min = cache.M[li];
    dW.noalias() += p * (dAm * Min.transpose());
    dW += 2.0 * W.cwiseProduct(dAv * cache.U[li].transpose());
    db += dAm.rowwise().sum();
    if (li == 0) break;
    const Matrix dU = W.cwiseProduct(W).transpose() * dAv;
    dM = p * (W.transpose() * dAm) + (2.0 * p * (1.0 - p)) * Min.cwiseProduct(dU);
    dS = p * dU;
  }
  return total * scale;
}

// ----------------------------------------------------------------- RNN

std::size_t RnnSpec::parameter_count() const {
  const std::size_t H = hidden;
  return H * inputs + H * H + H + static_cast<std::size_t>(outputs) * H + outputs;
}

void RnnSpec::validate() const {
  if (inputs < 1 || hidden < 1 || outputs < 1 || window < 1) {
    throw Error(ErrorKind::InvalidInput, "RnnSpec: sizes must be positive");
  }
  if (!(input_drop >= 0.0 && input_drop < 1.0) || !(hidden_drop >= 0.0 && hidden_drop < 1.0)) {
    throw Error(ErrorKind::InvalidInput, "RnnSpec: drop probabilities must be in [0,1)");
  }
}

FdNetSpec RnnSpec::as_feedforward() const {
  FdNetSpec s;
  s.inputs = inputs;
  s.layers = {{hidden, hidden_activation, input_drop}, {outputs, Activation::Identity, hidden_drop}};
  s.loss = loss;
  return s;
}

std::vector<double> init_params(const RnnSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<double> p(spec.parameter_count(), 0.0);
  std::span<double> all(p);
  const std::size_t H = spec.hidden, n = spec.inputs, O = spec.outputs;
  glorot(all.subspan(0, H * n), spec.inputs, spec.hidden, rng);
  glorot(all.subspan(H * n, H * H), spec.hidden, spec.hidden, rng);
  glorot(all.subspan(H * n + H * H + H, O * H), spec.hidden, spec.outputs, rng);
  return p;
}

std::vector<double> feedforward_params(const RnnSpec& spec, std::span<const double> params) {
  if (params.size() != spec.parameter_count()) {
    throw Error(ErrorKind::InvalidInput, "feedforward_params: wrong parameter length");
  }
  const std::size_t H = spec.hidden, n = spec.inputs;
  std::vector<double> out;
  out.insert(out.end(), params.begin(), params.begin() + static_cast<long>(H * n));
  const auto rest = params.subspan(H * n + H * H);
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

namespace {

struct RnnOffsets {
  std::size_t w_in, w_rec, b_h, w_out, b_y;
};

RnnOffsets rnn_offsets(const RnnSpec& s) {
  const std::size_t H = s.hidden;
  RnnOffsets o{};
  o.w_in = 0;
  o.w_rec = H * s.inputs;
  o.b_h = o.w_rec + H * H;
  o.w_out = o.b_h + H;
  o.b_y = o.w_out + static_cast<std::size_t>(s.outputs) * H;
  return o;
}

struct RnnCache {
  std::vector<Matrix> m, s;             // hidden moments h_0..h_T (single column each)
  std::vector<Matrix> u_in, u_rec, u_out;
  std::vector<ActivationCache> act;
  Matrix out_mean, out_var;
};

void rnn_forward_cached(const RnnSpec& spec, std::span<const double> params, const Matrix& X,
                        RnnCache& c) {
  spec.validate();
  if (params.size() != spec.parameter_count() || X.rows() != spec.inputs) {
    throw Error(ErrorKind::InvalidInput, "rnn_forward: shape mismatch");
  }
  if (X.cols() == 0) throw Error(ErrorKind::InvalidInput, "rnn_forward: empty sequence");
  const RnnOffsets o = rnn_offsets(spec);
  const int H = spec.hidden, O = spec.outputs;
  const ConstMap Win(params.data() + o.w_in, H, spec.inputs);
  const ConstMap Wrec(params.data() + o.w_rec, H, H);
  const ConstVecMap bh(params.data() + o.b_h, H);
  const ConstMap Wout(params.data() + o.w_out, O, H);
  const ConstVecMap by(params.data() + o.b_y, O);
  const double pin = 1.0 - spec.input_drop, ph = 1.0 - spec.hidden_drop;
  const Eigen::Index T = X.cols();
  c.m.assign(1, Matrix::Zero(H, 1));
  c.s.assign(1, Matrix::Zero(H, 1));
  c.u_in.clear();
  c.u_rec.clear();
  c.u_out.clear();
  c.act.clear();
  c.out_mean.resize(O, T);
  c.out_var.resize(O, T);
  const Matrix zero_in = Matrix::Zero(spec.inputs, 1);
  for (Eigen::Index t = 0; t < T; ++t) {
    Matrix am, av, U;
    dropout_affine(Win, bh, pin, Matrix(X.col(t)), zero_in, am, av, U);
    c.u_in.push_back(std::move(U));
    const Matrix& mp = c.m.back();
    const Matrix& sp = c.s.back();
    Matrix Ur = ph * sp + (ph * (1.0 - ph)) * mp.cwiseProduct(mp);
    am += ph * (Wrec * mp);
    av += Wrec.cwiseProduct(Wrec) * Ur;
    c.u_rec.push_back(std::move(Ur));
    ActivationCache ac;
    activate(am, av, spec.hidden_activation, ac);
    Matrix om, ov, Uo;
    dropout_affine(Wout, by, ph, ac.nu, ac.tau2, om, ov, Uo);
    c.out_mean.col(t) = om;
    c.out_var.col(t) = ov;
    c.u_out.push_back(std::move(Uo));
    c.m.push_back(ac.nu);
    c.s.push_back(ac.tau2);
    c.act.push_back(std::move(ac));
  }
}

}  // namespace

FdOutput rnn_forward(const RnnSpec& spec, std::span<const double> params, const Matrix& X) {
  RnnCache c;
  rnn_forward_cached(spec, params, X, c);
  return {std::move(c.out_mean), std::move(c.out_var)};
}

double rnn_loss(const RnnSpec& spec, std::span<const double> params, std::span<const Matrix> X,
                std::span<const Matrix> Y, std::span<const std::size_t> idx,
                std::vector<double>* grad) {
  if (grad) grad->assign(params.size(), 0.0);
  if (idx.empty()) return 0.0;
  const RnnOffsets o = rnn_offsets(spec);
  const int H = spec.hidden, O = spec.outputs;
  const ConstMap Win(params.data() + o.w_in, H, spec.inputs);
  const ConstMap Wrec(params.data() + o.w_rec, H, H);
  const ConstMap Wout(params.data() + o.w_out, O, H);
  const double pin = 1.0 - spec.input_drop, ph = 1.0 - spec.hidden_drop;
  const double scale = 1.0 / static_cast<double>(idx.size());
  double total = 0.0;
  RnnCache c;
  for (std::size_t n : idx) {
    const Matrix& Xs = X[n];
    const Matrix& Ys = Y[n];
    rnn_forward_cached(spec, params, Xs, c);
    if (Ys.rows() != O || Ys.cols() != Xs.cols()) {
      throw Error(ErrorKind::InvalidInput, "rnn_loss: target shape mismatch");
    }
    const Eigen::Index T = Xs.cols();
    Matrix dOm(O, T), dOv(O, T);
    for (Eigen::Index t = 0; t < T; ++t) {
      total += output_loss(spec.loss, Ys.col(t), c.out_mean.col(t), c.out_var.col(t), dOm.col(t),
                           dOv.col(t));
    }
    if (!grad) continue;
    dOm *= scale;
    dOv *= scale;
    double* G = grad->data();
    Map dWin(G + o.w_in, H, spec.inputs);
    Map dWrec(G + o.w_rec, H, H);
    VecMap dbh(G + o.b_h, H);
    Map dWout(G + o.w_out, O, H);
    VecMap dby(G + o.b_y, O);
    const Matrix WoutSq = Wout.cwiseProduct(Wout);
    const Matrix WrecSq = Wrec.cwiseProduct(Wrec);
    const Matrix Win2 = 2.0 * Win;
    Vector carry_m = Vector::Zero(H), carry_s = Vector::Zero(H);
    for (Eigen::Index t = T - 1; t >= 0; --t) {
      const std::size_t ts = static_cast<std::size_t>(t);
      const Matrix& mt = c.m[ts + 1];
      const Vector dom = dOm.col(t), dov = dOv.col(t);
      dWout.noalias() += ph * (dom * mt.transpose());
      dWout += 2.0 * Wout.cwiseProduct(dov * c.u_out[ts].transpose());
      dby += dom;
      const Vector dUo = WoutSq.transpose() * dov;
      Vector dm = carry_m + ph * (Wout.transpose() * dom) +
                  (2.0 * ph * (1.0 - ph)) * mt.col(0).cwiseProduct(dUo);
      Vector ds = carry_s + ph * dUo;
      const ActivationCache& ac = c.act[ts];
      const Vector dAm = dm.cwiseProduct(ac.dnu_dmu.col(0)) + ds.cwiseProduct(ac.dtau2_dmu.col(0));
      const Vector dAv = dm.cwiseProduct(ac.dnu_ds2.col(0)) + ds.cwiseProduct(ac.dtau2_ds2.col(0));
      dWin.noalias() += pin * (dAm * Xs.col(t).transpose());
      dWin += Win2.cwiseProduct(dAv * c.u_in[ts].transpose());
      dbh += dAm;
      const Matrix& mp = c.m[ts];
      dWrec.noalias() += ph * (dAm * mp.transpose());
      dWrec += 2.0 * Wrec.cwiseProduct(dAv * c.u_rec[ts].transpose());
      const Vector dUr = WrecSq.transpose() * dAv;
      carry_m = ph * (Wrec.transpose() * dAm) + (2.0 * ph * (1.0 - ph)) * mp.col(0).cwiseProduct(dUr);
      carry_s = ph * dUr;
    }
  }
  return total * scale;
}

// ------------------------------------------------------------- training

TrainTrace train_sgd(std::vector<double>& params, std::size_t n_train, const LossFn& loss,
                     const std::function<double(std::span<const double>)>& validation_loss,
                     const TrainConfig& config) {
  if (n_train == 0) throw Error(ErrorKind::InvalidInput, "train_sgd: empty training set");
  if (config.batch_size < 1 || config.learning_rate <= 0.0 || config.epochs < 0) {
    throw Error(ErrorKind::Config, "train_sgd: invalid optimizer settings");
  }
  TrainTrace trace;
  std::vector<std::size_t> all(n_train);
  std::iota(all.begin(), all.end(), 0);
  double prev = loss(params, all, nullptr);
  if (!std::isfinite(prev)) throw Error(ErrorKind::TrainingFailed, "initial training loss is not finite");
  trace.train_loss.push_back(prev);
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<double> best_params = params;
  if (validation_loss) {
    best_val = validation_loss(params);
    trace.validation_loss.push_back(best_val);
    trace.best_epoch = 0;
  }
  Rng rng = derive_rng(config.seed, 0x736764);
  std::vector<double> velocity(params.size(), 0.0), grad, snapshot;
  std::vector<std::size_t> order = all;
  double lr = config.learning_rate;
  int since_best = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    snapshot = params;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n_train; start += config.batch_size) {
      const std::size_t len = std::min<std::size_t>(config.batch_size, n_train - start);
      loss(params, std::span<const std::size_t>(order).subspan(start, len), &grad);
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = config.momentum * velocity[i] - lr * grad[i];
        params[i] += velocity[i];
      }
    }
    const double cur = loss(params, all, nullptr);
    if (!std::isfinite(cur) || cur > prev) {
      params = snapshot;
      std::fill(velocity.begin(), velocity.end(), 0.0);
      lr *= 0.5;
      ++trace.rejected_epochs;
      if (lr < config.min_learning_rate) {
        if (!std::isfinite(cur)) {
          std::ostringstream msg;
          msg << "training diverged (non-finite loss); accepted losses:";
          for (double v : trace.train_loss) msg << ' ' << v;
          throw Error(ErrorKind::TrainingFailed, msg.str());
        }
        break;
      }
      continue;
    }
    prev = cur;
    trace.train_loss.push_back(cur);
    if (validation_loss) {
      const double v = validation_loss(params);
      trace.validation_loss.push_back(v);
      if (v < best_val) {
        best_val = v;
        best_params = params;
        trace.best_epoch = static_cast<int>(trace.train_loss.size()) - 1;
        since_best = 0;
      } else if (++since_best >= config.patience) {
        break;
      }
    }
  }
  if (validation_loss) params = best_params;
  return trace;
}

}  // namespace nailforce::nn
