#pragma once

#include <span>
#include <vector>

namespace nailforce::post {

struct SmootherConfig {
  int span = 9;  // odd window length in samples
  int degree = 2;
  int robust_iterations = 3;

  void validate() const;
};

// Robust local quadratic regression: tricube distance weights over a centered
// window (truncated at the ends), then bisquare reweighting by residual.
std::vector<double> smooth(std::span<const double> series, const SmootherConfig& config = {});

}  // namespace nailforce::post
