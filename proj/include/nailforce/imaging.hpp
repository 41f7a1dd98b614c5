#pragma once

#include <cstdint>
#include <vector>

#include "nailforce/core.hpp"

namespace nailforce::imaging {

// Hexcone conversion. HSV frames store H in degrees [0,360) in channel 0,
// S and V in [0,1]; H = 0 when S = 0.
struct Hsv {
  double h, s, v;
};
Hsv rgb_to_hsv(double r, double g, double b);
std::array<double, 3> hsv_to_rgb(const Hsv& hsv);

// HSV frames are not unit-range in channel 0; they are returned as raw
// channel triplets.
struct HsvImage {
  int height = 0;
  int width = 0;
  std::vector<Hsv> pixels;
  const Hsv& at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
};
HsvImage rgb_to_hsv(const ImageFrame& frame);
ImageFrame hsv_to_rgb(const HsvImage& hsv, double timestamp = 0.0);

// Inclusive band; lo > hi wraps through 360 for hue.
struct Band {
  double lo;
  double hi;
  bool contains_hue(double h) const {
    return lo <= hi ? (h >= lo && h <= hi) : (h >= lo || h <= hi);
  }
  bool contains(double v) const { return v >= lo && v <= hi; }
};

struct SegmentationConfig {
  Band hue{340.0, 40.0};
  Band saturation{0.15, 0.85};
};

class Mask {
 public:
  Mask() = default;
  Mask(int height, int width) : height_(height), width_(width), bits_(static_cast<std::size_t>(height) * width, 0) {}
  int height() const { return height_; }
  int width() const { return width_; }
  bool at(int r, int c) const { return bits_[static_cast<std::size_t>(r) * width_ + c] != 0; }
  void set(int r, int c, bool v) { bits_[static_cast<std::size_t>(r) * width_ + c] = v ? 1 : 0; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  // (row, col) centroid; requires non-empty.
  std::array<double, 2> centroid() const;
  bool operator==(const Mask&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

double intersection_over_union(const Mask& a, const Mask& b);

// Largest 4-connected component of in-band pixels; may be empty.
Mask segment_nail(const ImageFrame& frame, const SegmentationConfig& config = {});

// Zeroes every pixel outside the mask.
ImageFrame apply_mask(const ImageFrame& frame, const Mask& mask);

struct TrackState {
  double row = 0.0;  // window center
  double col = 0.0;
  int win_height = 1;
  int win_width = 1;
};

enum class MeanShiftKernel { Box, Epanechnikov };

struct TrackResult {
  TrackState state;
  int iterations = 0;
  bool lost = false;
  std::vector<double> shifts;  // magnitude of each applied shift
};

// Non-negative weight map over a single-channel frame.
TrackResult mean_shift_track(const ImageFrame& weights, const TrackState& initial,
                             double epsilon = 0.1, int max_iter = 50,
                             MeanShiftKernel kernel = MeanShiftKernel::Box);

struct CenteredFrame {
  ImageFrame frame;
  int shift_row = 0;  // applied translation
  int shift_col = 0;
};

// Integer translation moving the mask centroid to the canonical center,
// output cropped/padded to out_height x out_width (zero fill).
CenteredFrame center_nail(const ImageFrame& frame, const Mask& mask, int out_height = 111,
                          int out_width = 105);
// Translates frame content by (dr, dc) into an out-sized canvas, zero fill.
ImageFrame translate(const ImageFrame& frame, int dr, int dc, int out_height, int out_width);
Mask translate(const Mask& mask, int dr, int dc, int out_height, int out_width);

// Separable Gaussian low-pass per channel, clamped borders, radius ceil(3 sigma).
// sigma <= 0 returns the frame unchanged.
ImageFrame gaussian_blur(const ImageFrame& frame, double sigma);

}  // namespace nailforce::imaging
