#include <Eigen/LU>
#include <cmath>
#include <memory>
#include <random>

#include "doctest.h"
#include "nailforce/gp.hpp"

using namespace nailforce;
using namespace nailforce::gp;

namespace {

Matrix random_matrix(int n, int d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = g(rng);
  return m;
}

// Dense evaluation with an explicit inverse and LU determinant.
double dense_lml(const Matrix& X, const Vector& y, const GpHyperparams& hp) {
  const int n = static_cast<int>(X.rows());
  Matrix K(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int k = 0; k < X.cols(); ++k) s += (X(i, k) - X(j, k)) * (X(i, k) - X(j, k));
      K(i, j) = hp.sigma_f2 * std::exp(-std::sqrt(s) / (2 * hp.length_scale * hp.length_scale));
    }
  K.diagonal().array() += hp.sigma_n2 + kJitter * hp.sigma_f2;
  Eigen::FullPivLU<Matrix> lu(K);
  const Matrix inv = lu.inverse();
  return -0.5 * y.dot(inv * y) - 0.5 * std::log(lu.determinant()) - 0.5 * n * std::log(2 * M_PI);
}

}  // namespace

TEST_CASE("se_kernel as printed") {
  GpHyperparams hp{1.0, 1.0, 0.1};
  const std::vector<double> a{0.0, 0.0}, b{2.0, 0.0};
  CHECK(se_kernel(a, a, hp) == doctest::Approx(1.0));
  CHECK(se_kernel(a, b, hp) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  CHECK(se_kernel(a, b, hp) == se_kernel(b, a, hp));
  const std::vector<double> c{1.0};
  CHECK_THROWS_AS(se_kernel(a, c, hp), Error);
  CHECK(se_kernel(a, b, hp, KernelDistance::Squared) == doctest::Approx(std::exp(-2.0)));
}

TEST_CASE("exact likelihood matches dense evaluation and finite differences") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 5 + trial, d = 1 + trial % 10;
    const Matrix X = random_matrix(n, d, rng);
    Vector y(n);
    for (int i = 0; i < n; ++i) y(i) = u(rng);
    const GpHyperparams hp{std::exp(u(rng)), std::exp(0.5 * u(rng)) * 1.5, std::exp(u(rng) - 1.0)};
    const Matrix D = pairwise_distance(X, X, KernelDistance::AsPrinted);
    const Likelihood lk = exact_log_likelihood(D, y, hp);
    CHECK(std::abs(lk.value - dense_lml(X, y, hp)) < 1e-10);
    const auto p = hp.to_log();
    for (int k = 0; k < 3; ++k) {
      const double h = 1e-5;
      auto hi = p, lo = p;
      hi[k] += h;
      lo[k] -= h;
      const double fd = (exact_log_likelihood(D, y, GpHyperparams::from_log(hi), false).value -
                         exact_log_likelihood(D, y, GpHyperparams::from_log(lo), false).value) /
                        (2 * h);
      CHECK(std::abs(fd - lk.gradient[k]) / std::max(1e-6, std::abs(fd)) < 1e-4);
    }
  }
}

TEST_CASE("predictive equations in scalar case") {
  auto X = std::make_shared<Matrix>(Matrix::Zero(1, 2));
  Vector y(1);
  y << 2.0;
  const GpModel m = GpModel::exact(X, y, {1.0, 1.0, 1.0});
  const auto p = m.predict(std::vector<double>{0.0, 0.0});
  CHECK(p.mean == doctest::Approx(1.0).epsilon(1e-7));
  CHECK(p.variance == doctest::Approx(0.5).epsilon(1e-7));
  const auto far = m.predict(std::vector<double>{1e6, 0.0});
  CHECK(std::abs(far.mean) < 1e-12);
  CHECK(far.variance == doctest::Approx(1.0));
}

TEST_CASE("interpolation limit") {
  std::mt19937_64 rng(3);
  auto X = std::make_shared<Matrix>(random_matrix(8, 3, rng));
  Vector y = Vector::LinSpaced(8, -1, 1);
  const GpModel m = GpModel::exact(X, y, {1.0, 1.0, 1e-10});
  const auto pr = m.predict(*X);
  for (int i = 0; i < 8; ++i) CHECK(std::abs(pr[i].mean - y(i)) < 1e-4);
}

TEST_CASE("duplicate consistent data drives noise to its floor") {
  auto X = std::make_shared<Matrix>(Matrix::Ones(2, 1));
  Vector y(2);
  y << 0.7, 0.7;
  OptimizerConfig cfg;
  const GpModel m = fit_exact(X, y, {1.0, 1.0, 0.1}, cfg);
  // Oracle: on a grid the likelihood increases as sigma_n2 decreases.
  const Matrix D = pairwise_distance(*X, *X, KernelDistance::AsPrinted);
  double prev = -1e300;
  for (double ln = 0.0; ln >= -16.0; ln -= 2.0) {
    const double v = exact_log_likelihood(D, y, {m.hyperparams().sigma_f2, 1.0, std::exp(ln)}, false).value;
    CHECK(v > prev);
    prev = v;
  }
  CHECK(m.hyperparams().sigma_n2 < 1e-4);
}

TEST_CASE("fitc with full inducing set equals exact") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 10 + 8 * trial;
    auto X = std::make_shared<Matrix>(random_matrix(n, 4, rng));
    Vector y = Vector::Random(n);
    const GpHyperparams hp{1.3, 1.1, 0.05};
    std::vector<int> all(n);
    for (int i = 0; i < n; ++i) all[i] = i;
    const GpModel e = GpModel::exact(X, y, hp);
    const GpModel f = GpModel::fitc(*X, y, all, hp);
    const Matrix Q = random_matrix(30, 4, rng);
    const auto pe = e.predict(Q), pf = f.predict(Q);
    for (int i = 0; i < 30; ++i) {
      CHECK(std::abs(pe[i].mean - pf[i].mean) < 1e-8);
      CHECK(std::abs(pe[i].variance - pf[i].variance) < 1e-8);
    }
    CHECK(std::abs(e.log_likelihood() - f.log_likelihood()) < 1e-6);
  }
}

TEST_CASE("fitc rank-one predictive mean") {
  std::mt19937_64 rng(5);
  const Matrix X = random_matrix(12, 2, rng);
  const Vector y = Vector::Random(12);
  const GpHyperparams hp{1.0, 0.9, 0.2};
  const GpModel f = GpModel::fitc(X, y, {4}, hp);
  // closed form, m(x) = k(x,u) * sum_i k_iu y_i / L_i / (k_uu + sum_i k_iu^2 / L_i)
  const double kuu = hp.sigma_f2 * (1 + kJitter);
  double num = 0, den = kuu;
  for (int i = 0; i < 12; ++i) {
    // the jitter nugget sits on the inducing row itself
    const double kiu = se_kernel(std::vector<double>{X(i, 0), X(i, 1)}, std::vector<double>{X(4, 0), X(4, 1)}, hp) +
                       (i == 4 ? kJitter * hp.sigma_f2 : 0.0);
    const double lam = hp.sigma_f2 - kiu * kiu / kuu + hp.sigma_n2 + kJitter * hp.sigma_f2;
    num += kiu * y(i) / lam;
    den += kiu * kiu / lam;
  }
  const Matrix Q = random_matrix(10, 2, rng);
  const auto pr = f.predict(Q);
  for (int q = 0; q < 10; ++q) {
    const double kq = se_kernel(std::vector<double>{Q(q, 0), Q(q, 1)}, std::vector<double>{X(4, 0), X(4, 1)}, hp);
    CHECK(pr[q].mean == doctest::Approx(kq * num / den).epsilon(1e-9));
    CHECK(pr[q].variance >= 0.0);
  }
}

TEST_CASE("batch equals single queries and permutation invariance") {
  std::mt19937_64 rng(9);
  Matrix X = random_matrix(15, 3, rng);
  Vector y = Vector::Random(15);
  const GpHyperparams hp{1.0, 1.2, 0.1};
  const GpModel m = GpModel::exact(std::make_shared<Matrix>(X), y, hp);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(15);
  perm.setIdentity();
  std::shuffle(perm.indices().data(), perm.indices().data() + 15, rng);
  const GpModel mp = GpModel::exact(std::make_shared<Matrix>(perm * X), perm * y, hp);
  const Matrix Q = random_matrix(6, 3, rng);
  const auto batch = m.predict(Q);
  for (int i = 0; i < 6; ++i) {
    const std::vector<double> q{Q(i, 0), Q(i, 1), Q(i, 2)};
    const auto s = m.predict(q);
    CHECK(s.mean == doctest::Approx(batch[i].mean).epsilon(1e-12));
    CHECK(std::abs(mp.predict(q).mean - s.mean) < 1e-10);
  }
}

TEST_CASE("select_inducing bounds") {
  Rng rng(1);
  CHECK_THROWS_AS(select_inducing(5, 6, rng), Error);
  const auto s = select_inducing(100, 17, rng);
  CHECK(s.size() == 17);
  CHECK(std::is_sorted(s.begin(), s.end()));
  CHECK(std::adjacent_find(s.begin(), s.end()) == s.end());
}

TEST_CASE("state round trip") {
  std::mt19937_64 rng(2);
  const Matrix X = random_matrix(20, 3, rng);
  const Vector y = Vector::Random(20);
  const GpModel f = GpModel::fitc(X, y, {1, 5, 9}, {1.0, 1.0, 0.1});
  const GpModel g = GpModel::from_state(f.state());
  const auto a = f.predict(X), b = g.predict(X);
  for (int i = 0; i < 20; ++i) CHECK(a[i].mean == b[i].mean);
}
