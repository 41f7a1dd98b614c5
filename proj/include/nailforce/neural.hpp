#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "nailforce/core.hpp"
#include "nailforce/util.hpp"

namespace nailforce::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// h(m,n) = sum_u sum_v w(u,v) g(u+m, v+n) + b  (valid cross-correlation).
Matrix conv2d(const Matrix& g, const Matrix& w, double b);

// r1 x r2 max pooling, stride = window; ragged bottom/right edges are padded
// with -inf. `argmax` (optional) receives the flat source index per output.
Matrix maxpool(const Matrix& h, int r1, int r2, std::vector<Eigen::Index>* argmax = nullptr);

// Norm: sum ||y - yhat||_2 / N.  Squared: sum ||y - yhat||_2^2 / N.
enum class LossKind { Norm, Squared };

// ---------------------------------------------------------------- CNN

struct CnnSpec {
  int input_height = 111;
  int input_width = 105;
  int conv1_kernels = 8;
  int conv2_kernels = 25;
  int kernel_size = 5;
  int pool = 2;
  int hidden = 100;
  int outputs = 8;
  LossKind loss = LossKind::Norm;

  struct Shapes {
    int c1h, c1w, p1h, p1w, c2h, c2w, p2h, p2w;
    std::size_t flat;
  };
  Shapes shapes() const;
  std::size_t parameter_count() const;
  void validate() const;
};

// Flat parameter layout: conv1 w,b | conv2 w,b | hidden W,b | output W,b.
// Every conv2 kernel spans all conv1 maps.
class Cnn {
 public:
  Cnn() = default;
  Cnn(const CnnSpec& spec, Rng& rng);
  Cnn(const CnnSpec& spec, std::vector<double> params);

  const CnnSpec& spec() const { return spec_; }
  const std::vector<double>& params() const { return params_; }
  std::vector<double>& params() { return params_; }

  Vector forward(const Matrix& image) const;
  // Mean loss over the selected samples; gradient (size parameter_count) is
  // overwritten when non-null. Y holds one target per column.
  double loss(std::span<const Matrix> images, const Matrix& Y, std::span<const std::size_t> idx,
              std::vector<double>* grad) const;

 private:
  CnnSpec spec_;
  std::vector<double> params_;
};

// ---------------------------------------------------------- fast dropout

enum class Activation { Identity, Sigmoid, Tanh };

struct UnitMoments {
  double nu = 0.0;    // E[f(X)]
  double tau2 = 0.0;  // Var[f(X)]
  // partial derivatives w.r.t. the input mean and variance
  double dnu_dmu = 0.0, dnu_ds2 = 0.0, dtau2_dmu = 0.0, dtau2_ds2 = 0.0;
};

// Gaussian moment map of f(X), X ~ N(mu, s2).
// Sigmoid: nu = sigmoid(mu / sqrt(1 + pi s2 / 8)); tau2 is the variance of the
// probit surrogate Phi(sqrt(pi/8) X). Tanh uses tanh(x) = 2 sigmoid(2x) - 1.
UnitMoments fd_unit_moments(double mu, double s2, Activation activation);

struct LayerMoments {
  Vector mean;
  Vector var;
};

// Pre-activation moments of a = W (z o x) + b, z_i ~ Bernoulli(p):
//   mean = p W E[x] + b,  var = (W o W)(p Var[x] + p(1-p) E[x]^2).
LayerMoments fd_layer_moments(const Vector& mean, const Vector& var, const Matrix& W,
                              const Vector& b, double keep_prob);

struct FdLayerSpec {
  int units = 1;
  Activation activation = Activation::Tanh;
  double drop_prob = 0.0;  // applied to this layer's inputs
};

struct FdNetSpec {
  int inputs = 1;
  std::vector<FdLayerSpec> layers;
  LossKind loss = LossKind::Squared;

  // tanh 170/120/35, identity output, drop 0.3.
  static FdNetSpec nn_default(int inputs, int outputs);
  std::size_t parameter_count() const;
  void validate() const;
};

struct FdOutput {
  Matrix mean;  // outputs x batch
  Matrix var;
};

// Flat layout per layer: W (units x fan_in, column-major) then b.
std::vector<double> init_params(const FdNetSpec& spec, Rng& rng);
FdOutput fd_forward(const FdNetSpec& spec, std::span<const double> params, const Matrix& X);

// Expected loss under the propagated Gaussian: Squared -> ||y - mu||^2 + tr S,
// Norm -> sqrt(||y - mu||^2 + tr S); averaged over the selected columns.
double fd_loss(const FdNetSpec& spec, std::span<const double> params, const Matrix& X,
               const Matrix& Y, std::span<const std::size_t> idx, std::vector<double>* grad);

// ----------------------------------------------------------------- RNN

struct RnnSpec {
  int inputs = 1;
  int hidden = 100;
  int outputs = 8;
  double input_drop = 0.5;
  double hidden_drop = 0.5;
  Activation hidden_activation = Activation::Tanh;
  LossKind loss = LossKind::Norm;
  int window = 32;  // training sequence length

  std::size_t parameter_count() const;
  void validate() const;
  // The T = 1 network: one hidden layer then a linear output.
  FdNetSpec as_feedforward() const;
};

// Layout: W_in (H x n) | W_rec (H x H) | b_h | W_out (O x H) | b_y.
std::vector<double> init_params(const RnnSpec& spec, Rng& rng);
// W_rec dropped; result is laid out for spec.as_feedforward().
std::vector<double> feedforward_params(const RnnSpec& spec, std::span<const double> params);

// Sequence input n x T -> output moments O x T. h_0 = 0.
FdOutput rnn_forward(const RnnSpec& spec, std::span<const double> params, const Matrix& X);
// Sum over time of the per-step loss, averaged over the selected sequences.
double rnn_loss(const RnnSpec& spec, std::span<const double> params, std::span<const Matrix> X,
                std::span<const Matrix> Y, std::span<const std::size_t> idx,
                std::vector<double>* grad);

// ------------------------------------------------------------- training

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  int patience = 10;          // epochs without validation improvement
  double min_learning_rate = 1e-10;
  std::uint64_t seed = 1;
};

struct TrainTrace {
  std::vector<double> train_loss;       // accepted epochs, non-increasing
  std::vector<double> validation_loss;  // per accepted epoch (empty without validation)
  int best_epoch = -1;
  int rejected_epochs = 0;
};

// Mean loss over `idx`; writes the gradient when non-null.
using LossFn = std::function<double(std::span<const double> params,
                                    std::span<const std::size_t> idx, std::vector<double>* grad)>;

// Mini-batch SGD with momentum. An epoch that raises the full training loss is
// rolled back and the learning rate halved. With a validation loss the
// parameters with the best validation score are returned (early stopping).
TrainTrace train_sgd(std::vector<double>& params, std::size_t n_train, const LossFn& loss,
                     const std::function<double(std::span<const double>)>& validation_loss,
                     const TrainConfig& config);

}  // namespace nailforce::nn
