#pragma once

#include <span>
#include <vector>

#include "nailforce/core.hpp"

namespace nailforce::sync {

struct BinarySignal {
  std::vector<int> samples;  // 0/1
  double rate = 0.0;         // Hz

  double duration() const { return samples.size() / rate; }
  void validate() const;
};

struct Roi {
  int row = 0;
  int col = 0;
  int height = 1;
  int width = 1;
};

// Per-frame ROI mean, thresholded halfway between its 10th and 90th
// percentiles. Throws NoSignal when the ROI intensity never changes.
BinarySignal extract_led(std::span<const ImageFrame> frames, const Roi& roi,
                         double rate);

// Nearest-sample resampling; ties go to the earlier sample so integer
// upsampling duplicates each value.
BinarySignal resample(const BinarySignal& signal, double target_rate);

// b delayed by k samples relative to a: b[i] = a[i - k].
std::vector<int> shift(std::span<const int> a, int k, int fill = 0);

struct OffsetEstimate {
  int lag = 0;       // samples; b[i] ~ a[i - lag]
  double score = 0;  // Pearson correlation over the overlap, in [-1,1]
};

// argmax over |lag| <= max_lag of the overlap-normalized cross-correlation.
OffsetEstimate find_offset(const BinarySignal& a, const BinarySignal& b,
                           int max_lag);

// Linear interpolation of a wrench stream at time t (clamped at the ends).
Wrench interpolate_wrench(std::span<const Wrench> wrenches, double t);

struct SyncResult {
  double offset_s = 0.0;  // added to camera timestamps
  OffsetEstimate estimate;
  std::vector<Wrench> frame_labels;  // one per frame, on the common time base
};

// Recovers the camera offset from the trial's LED streams, shifts frame
// timestamps and labels each frame with the interpolated wrench.
SyncResult synchronize_trial(Trial& trial, double max_lag_s = 1.0);

}  // namespace nailforce::sync
