#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "nailforce/core.hpp"
#include "nailforce/util.hpp"

namespace nailforce::gp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// AsPrinted: sf2 * exp(-|x - x'| / (2 l^2)) (unsquared norm).
// Squared:   sf2 * exp(-|x - x'|^2 / (2 l^2)), the conventional SE kernel.
enum class KernelDistance { AsPrinted, Squared };

struct GpHyperparams {
  double sigma_f2 = 1.0;
  double length_scale = 1.0;
  double sigma_n2 = 0.1;

  std::array<double, 3> to_log() const;
  static GpHyperparams from_log(const std::array<double, 3>& log_params);
  void validate() const;
};

inline constexpr double kJitter = 1e-8;  // relative to sigma_f2

double se_kernel(std::span<const double> x, std::span<const double> x2, const GpHyperparams& hp,
                 KernelDistance distance = KernelDistance::AsPrinted);

// Row-wise pairwise distances (plain or squared per `distance`).
Matrix pairwise_distance(const Matrix& a, const Matrix& b, KernelDistance distance);
// Kernel from a distance matrix produced by pairwise_distance.
Matrix kernel_from_distance(const Matrix& d, const GpHyperparams& hp);

struct Likelihood {
  double value = 0.0;
  std::array<double, 3> gradient{};  // d/d log(sigma_f2), log(l), log(sigma_n2)
};

// log p(y|X) = -1/2 y^T Ky^-1 y - 1/2 log|Ky| - N/2 log(2 pi),
// Ky = K + (sigma_n2 + kJitter * sigma_f2) I. Throws Numerical if Ky is not PD.
Likelihood exact_log_likelihood(const Matrix& distances, const Vector& y, const GpHyperparams& hp,
                                bool with_gradient = true);

// FITC marginal likelihood given inducing-to-training and inducing-to-inducing
// distances; value only. Never forms an N x N matrix. `inducing` lists the
// training row of each inducing point (empty when they are not training rows).
double fitc_log_likelihood(const Matrix& d_uf, const Matrix& d_uu, const Vector& y,
                           const GpHyperparams& hp, std::span<const int> inducing = {});

enum class OptimizerMethod { Bfgs, Rprop };

struct OptimizerConfig {
  OptimizerMethod method = OptimizerMethod::Bfgs;
  int max_iterations = 200;
  int restarts = 3;
  double min_log_param = -18.0;
  double max_log_param = 12.0;
  double min_noise = 1e-8;
  std::uint64_t seed = 1;
  KernelDistance distance = KernelDistance::AsPrinted;
};

enum class Mode { Exact, Fitc };

struct Prediction {
  double mean = 0.0;
  double variance = 0.0;
};

// One scalar-output GP. Immutable once fitted.
class GpModel {
 public:
  Mode mode() const { return mode_; }
  const GpHyperparams& hyperparams() const { return hp_; }
  KernelDistance distance() const { return distance_; }
  int input_dim() const { return static_cast<int>(basis_->cols()); }
  double log_likelihood() const { return log_likelihood_; }
  // Training rows used as inducing inputs (fitc).
  const std::vector<int>& inducing_indices() const { return inducing_; }
  // Training inputs (exact) or inducing inputs (fitc).
  const Matrix& basis() const { return *basis_; }

  Prediction predict(std::span<const double> x) const;
  std::vector<Prediction> predict(const Matrix& queries) const;

  // Builds a model for fixed hyperparameters.
  static GpModel exact(std::shared_ptr<const Matrix> X, const Vector& y, const GpHyperparams& hp,
                       KernelDistance distance = KernelDistance::AsPrinted);
  static GpModel fitc(const Matrix& X, const Vector& y, std::vector<int> inducing,
                      const GpHyperparams& hp, KernelDistance distance = KernelDistance::AsPrinted);

  // Serialization support: raw state.
  struct State {
    Mode mode = Mode::Exact;
    KernelDistance distance = KernelDistance::AsPrinted;
    GpHyperparams hp;
    double log_likelihood = 0.0;
    Matrix basis;
    Vector weights;        // mean weights over basis rows
    Matrix var_factor;     // exact: chol L of Ky; fitc: chol of Kuu
    Matrix var_factor2;    // fitc: chol of A (empty for exact)
    std::vector<int> inducing;
  };
  State state() const;
  static GpModel from_state(State s);

 private:
  Mode mode_ = Mode::Exact;
  KernelDistance distance_ = KernelDistance::AsPrinted;
  GpHyperparams hp_;
  double log_likelihood_ = 0.0;
  std::shared_ptr<const Matrix> basis_;
  Vector weights_;
  Matrix factor_;   // lower Cholesky (exact: Ky, fitc: Kuu)
  Matrix factor2_;  // fitc: lower Cholesky of A = I + V Lambda^-1 V^T
  std::vector<int> inducing_;
};

// Maximizes the exact marginal likelihood over log hyperparameters.
GpModel fit_exact(std::shared_ptr<const Matrix> X, const Vector& y, const GpHyperparams& init,
                  const OptimizerConfig& config = {});
// Same, with a precomputed training distance matrix.
GpModel fit_exact(std::shared_ptr<const Matrix> X, const Matrix& distances, const Vector& y,
                  const GpHyperparams& init, const OptimizerConfig& config);

// Uniform M-subset of the rows, sorted.
std::vector<int> select_inducing(int n, int m, Rng& rng);

// FITC with a random inducing subset of size M, hyperparameters fitted on the
// FITC likelihood.
GpModel fit_fitc(const Matrix& X, const Vector& y, int m, const GpHyperparams& init, Rng& rng,
                 const OptimizerConfig& config = {});
GpModel fit_fitc_with(const Matrix& X, const Vector& y, std::vector<int> inducing,
                      const GpHyperparams& init, const OptimizerConfig& config = {});

// Median pairwise distance heuristic for the length scale.
GpHyperparams default_hyperparams(const Matrix& X, const Vector& y, KernelDistance distance);

}  // namespace nailforce::gp
