#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "nailforce/core.hpp"

namespace nailforce::align {

inline constexpr int kLevels = 3;

// Dense per-pixel displacement; a sample for output pixel (r,c) is read from
// the source at (r + dy, c + dx).
struct DisplacementField {
  int height = 0;
  int width = 0;
  std::vector<double> dx;
  std::vector<double> dy;

  static DisplacementField zeros(int height, int width);
  std::size_t index(int r, int c) const { return static_cast<std::size_t>(r) * width + c; }
};

// Cubic B-spline lattice of 2-vector control displacements. Node (i,j) sits at
// pixel ((i-1)*spacing, (j-1)*spacing).
struct ControlGrid {
  double spacing = 8.0;
  int rows = 0;
  int cols = 0;
  std::vector<double> dx;
  std::vector<double> dy;

  static ControlGrid zeros(int canvas_height, int canvas_width, double spacing);
  std::size_t index(int i, int j) const { return static_cast<std::size_t>(i) * cols + j; }
  std::size_t size() const { return dx.size(); }
};

// Three hierarchical control lattices whose fields add up.
class FfdTransform {
 public:
  FfdTransform() = default;
  FfdTransform(int canvas_height, int canvas_width, const std::array<double, kLevels>& spacings);

  int height() const { return height_; }
  int width() const { return width_; }
  ControlGrid& level(int l) { return levels_[l]; }
  const ControlGrid& level(int l) const { return levels_[l]; }

  DisplacementField field() const;
  DisplacementField level_field(int l) const;
  double max_control_displacement() const;

 private:
  int height_ = 0;
  int width_ = 0;
  std::array<ControlGrid, kLevels> levels_;
};

// Backward warp with bilinear interpolation; samples outside the canvas read 0.
// The output is not clamped to [0,1] (bilinear blends of unit data stay in range).
ImageFrame warp(const ImageFrame& image, const DisplacementField& field);
ImageFrame warp(const ImageFrame& image, const FfdTransform& transform);

// Fixed-point inverse: e(x) = -d(x + e(x)).
DisplacementField invert_field(const DisplacementField& field, int iterations = 50);

struct AlignmentConfig {
  double w = 1000.0;  // weight of the intensity-correction smoothness penalty
  std::array<double, kLevels> spacings{32.0, 16.0, 8.0};
  std::array<double, kLevels> step_px{2.0, 1.0, 0.5};  // initial max control step
  std::array<int, kLevels> max_iterations{150, 150, 150};
  double tolerance = 1e-7;  // relative energy decrease that ends a level
  int max_backtracks = 20;
  double armijo = 1e-4;
  int cg_iterations = 40;
  double cg_tolerance = 1e-8;

  void validate() const;
};

// Intensity correction field v with the reference's shape (single channel).
struct IntensityCorrection {
  int height = 0;
  int width = 0;
  std::vector<double> v;
};

struct EnergyResult {
  double energy = 0.0;
  double data_term = 0.0;     // ||R - J(T) - v||^2
  double penalty_term = 0.0;  // ||P v||^2 (unweighted)
  std::array<std::vector<double>, kLevels> grad_dx;
  std::array<std::vector<double>, kLevels> grad_dy;
  std::vector<double> grad_v;
};

// E = ||R - J(T) - v||^2 + w ||P v||^2 with P the zero-flux 5-point Laplacian.
// R and J must be single-channel and share a canvas with T.
EnergyResult energy(const ImageFrame& reference, const ImageFrame& moving,
                    const FfdTransform& transform, const IntensityCorrection& correction,
                    double w, bool with_gradients = true);

// Applies the zero-flux 5-point Laplacian.
std::vector<double> laplacian(std::span<const double> v, int height, int width);

// Minimizer of ||b - v||^2 + w||P v||^2 given b, starting from v (CG).
void solve_correction(std::span<const double> b, double w, IntensityCorrection& correction,
                      int max_iterations, double tolerance);

struct AlignmentResult {
  FfdTransform transform;
  IntensityCorrection correction;
  ImageFrame aligned;  // all channels of the moving frame warped by transform
  std::vector<double> energy_trace;
  std::vector<int> trace_level;  // level active for each trace entry
};

// Coarse-to-fine registration of `moving` onto `reference`. The estimation
// channel (default blue) drives the optimization; the recovered transform is
// applied to every channel of `moving`.
AlignmentResult align(const ImageFrame& reference, const ImageFrame& moving,
                      const AlignmentConfig& config = {}, int estimation_channel = 2);

// Same, starting from an existing transform (its canvas must match).
AlignmentResult align_from(const ImageFrame& reference, const ImageFrame& moving,
                           FfdTransform initial, const AlignmentConfig& config,
                           int estimation_channel = 2);

}  // namespace nailforce::align
