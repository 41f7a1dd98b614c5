#include "nailforce/imaging.hpp"

#include <algorithm>
#include <cmath>

namespace nailforce::imaging {

Hsv rgb_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  Hsv out{0.0, 0.0, mx};
  if (mx <= 0.0 || delta <= 0.0) return out;
  out.s = delta / mx;
  double h;
  if (mx == r) {
    h = 60.0 * std::fmod((g - b) / delta, 6.0);
  } else if (mx == g) {
    h = 60.0 * ((b - r) / delta + 2.0);
  } else {
    h = 60.0 * ((r - g) / delta + 4.0);
  }
  if (h < 0.0) h += 360.0;
  if (h >= 360.0) h -= 360.0;
  out.h = h;
  return out;
}

std::array<double, 3> hsv_to_rgb(const Hsv& hsv) {
  const double c = hsv.v * hsv.s;
  const double hp = std::fmod(hsv.h, 360.0) / 60.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(std::floor(hp))) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = hsv.v - c;
  return {r + m, g + m, b + m};
}

HsvImage rgb_to_hsv(const ImageFrame& frame) {
  if (frame.channels() != 3) {
    throw Error(ErrorKind::InvalidInput, "rgb_to_hsv: expected a 3-channel frame");
  }
  HsvImage out{frame.height(), frame.width(), {}};
  out.pixels.reserve(frame.pixel_count());
  for (int r = 0; r < frame.height(); ++r) {
    for (int c = 0; c < frame.width(); ++c) {
      out.pixels.push_back(rgb_to_hsv(frame.at(r, c, 0), frame.at(r, c, 1), frame.at(r, c, 2)));
    }
  }
  return out;
}

ImageFrame hsv_to_rgb(const HsvImage& hsv, double timestamp) {
  ImageFrame out(hsv.height, hsv.width, 3, timestamp);
  for (int r = 0; r < hsv.height; ++r) {
    for (int c = 0; c < hsv.width; ++c) {
      const auto rgb = hsv_to_rgb(hsv.at(r, c));
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = std::clamp(rgb[ch], 0.0, 1.0);
    }
  }
  return out;
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1));
}

std::array<double, 2> Mask::centroid() const {
  double sr = 0, sc = 0;
  std::size_t n = 0;
  for (int r = 0; r < height_; ++r) {
    for (int c = 0; c < width_; ++c) {
      if (at(r, c)) {
        sr += r;
        sc += c;
        ++n;
      }
    }
  }
  if (n == 0) throw Error(ErrorKind::CannotCenter, "centroid of an empty mask");
  return {sr / n, sc / n};
}

double intersection_over_union(const Mask& a, const Mask& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw Error(ErrorKind::InvalidInput, "IoU: mask shapes differ");
  }
  std::size_t inter = 0, uni = 0;
  for (int r = 0; r < a.height(); ++r) {
    for (int c = 0; c < a.width(); ++c) {
      inter += a.at(r, c) && b.at(r, c);
      uni += a.at(r, c) || b.at(r, c);
    }
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

Mask segment_nail(const ImageFrame& frame, const SegmentationConfig& config) {
  const HsvImage hsv = rgb_to_hsv(frame);
  const int h = frame.height(), w = frame.width();
  Mask band(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const Hsv& p = hsv.at(r, c);
      band.set(r, c, config.saturation.contains(p.s) && config.hue.contains_hue(p.h));
    }
  }
  // label 4-connected components, keep the largest (first found on ties)
  std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
  std::vector<int> stack;
  int best_label = -1;
  std::size_t best_size = 0;
  int next = 0;
  for (int r0 = 0; r0 < h; ++r0) {
    for (int c0 = 0; c0 < w; ++c0) {
      const int idx0 = r0 * w + c0;
      if (!band.at(r0, c0) || label[idx0] >= 0) continue;
      std::size_t size = 0;
      label[idx0] = next;
      stack.assign(1, idx0);
      while (!stack.empty()) {
        const int idx = stack.back();
        stack.pop_back();
        ++size;
        const int r = idx / w, c = idx % w;
        const int nr[4] = {r - 1, r + 1, r, r};
        const int nc[4] = {c, c, c - 1, c + 1};
        for (int k = 0; k < 4; ++k) {
          if (nr[k] < 0 || nr[k] >= h || nc[k] < 0 || nc[k] >= w) continue;
          const int nidx = nr[k] * w + nc[k];
          if (label[nidx] < 0 && band.at(nr[k], nc[k])) {
            label[nidx] = next;
            stack.push_back(nidx);
          }
        }
      }
      if (size > best_size) {
        best_size = size;
        best_label = next;
      }
      ++next;
    }
  }
  Mask out(h, w);
  if (best_label < 0) return out;
  for (int i = 0; i < h * w; ++i) {
    if (label[i] == best_label) out.set(i / w, i % w, true);
  }
  return out;
}

ImageFrame apply_mask(const ImageFrame& frame, const Mask& mask) {
  if (mask.height() != frame.height() || mask.width() != frame.width()) {
    throw Error(ErrorKind::InvalidInput, "apply_mask: shape mismatch");
  }
  ImageFrame out = frame;
  for (int r = 0; r < frame.height(); ++r) {
    for (int c = 0; c < frame.width(); ++c) {
      if (!mask.at(r, c)) {
        for (int ch = 0; ch < frame.channels(); ++ch) out.at(r, c, ch) = 0.0;
      }
    }
  }
  return out;
}

namespace {

void clamp_window(TrackState& s, int h, int w) {
  const double hr = s.win_height / 2.0, hc = s.win_width / 2.0;
  s.row = std::clamp(s.row, hr - 0.5, h - 0.5 - hr);
  s.col = std::clamp(s.col, hc - 0.5, w - 0.5 - hc);
}

}  // namespace

TrackResult mean_shift_track(const ImageFrame& weights, const TrackState& initial,
                             double epsilon, int max_iter, MeanShiftKernel kernel) {
  if (weights.channels() != 1) {
    throw Error(ErrorKind::InvalidInput, "mean_shift_track: weight map must be single-channel");
  }
  const int h = weights.height(), w = weights.width();
  if (initial.win_height < 1 || initial.win_width < 1 || initial.win_height > h ||
      initial.win_width > w) {
    throw Error(ErrorKind::InvalidInput, "mean_shift_track: window does not fit the frame");
  }
  TrackResult res;
  res.state = initial;
  clamp_window(res.state, h, w);
  for (int it = 0; it < max_iter; ++it) {
    const double hr = res.state.win_height / 2.0, hc = res.state.win_width / 2.0;
    const int r0 = std::max(0, static_cast<int>(std::ceil(res.state.row - hr)));
    const int r1 = std::min(h - 1, static_cast<int>(std::floor(res.state.row + hr)));
    const int c0 = std::max(0, static_cast<int>(std::ceil(res.state.col - hc)));
    const int c1 = std::min(w - 1, static_cast<int>(std::floor(res.state.col + hc)));
    double sw = 0, sr = 0, sc = 0;
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        double k = 1.0;
        if (kernel == MeanShiftKernel::Epanechnikov) {
          const double dr = (r - res.state.row) / hr, dc = (c - res.state.col) / hc;
          k = std::max(0.0, 1.0 - dr * dr - dc * dc);
        }
        const double wt = weights.at(r, c) * k;
        sw += wt;
        sr += wt * r;
        sc += wt * c;
      }
    }
    if (!(sw > 0.0)) {
      res.state = initial;
      res.lost = true;
      return res;
    }
    TrackState next = res.state;
    next.row = sr / sw;
    next.col = sc / sw;
    clamp_window(next, h, w);
    const double shift = std::hypot(next.row - res.state.row, next.col - res.state.col);
    res.state = next;
    res.iterations = it + 1;
    res.shifts.push_back(shift);
    if (shift < epsilon) break;
  }
  return res;
}

ImageFrame translate(const ImageFrame& frame, int dr, int dc, int out_height, int out_width) {
  ImageFrame out(out_height, out_width, frame.channels(), frame.timestamp());
  for (int r = 0; r < out_height; ++r) {
    const int sr = r - dr;
    if (sr < 0 || sr >= frame.height()) continue;
    for (int c = 0; c < out_width; ++c) {
      const int sc = c - dc;
      if (sc < 0 || sc >= frame.width()) continue;
      for (int ch = 0; ch < frame.channels(); ++ch) out.at(r, c, ch) = frame.at(sr, sc, ch);
    }
  }
  return out;
}

Mask translate(const Mask& mask, int dr, int dc, int out_height, int out_width) {
  Mask out(out_height, out_width);
  for (int r = 0; r < out_height; ++r) {
    const int sr = r - dr;
    if (sr < 0 || sr >= mask.height()) continue;
    for (int c = 0; c < out_width; ++c) {
      const int sc = c - dc;
      if (sc >= 0 && sc < mask.width() && mask.at(sr, sc)) out.set(r, c, true);
    }
  }
  return out;
}

CenteredFrame center_nail(const ImageFrame& frame, const Mask& mask, int out_height,
                          int out_width) {
  if (mask.empty()) throw Error(ErrorKind::CannotCenter, "center_nail: empty mask");
  if (mask.height() != frame.height() || mask.width() != frame.width()) {
    throw Error(ErrorKind::InvalidInput, "center_nail: mask/frame shape mismatch");
  }
  const auto [cr, cc] = mask.centroid();
  const double target_r = (out_height - 1) / 2.0;
  const double target_c = (out_width - 1) / 2.0;
  CenteredFrame out;
  out.shift_row = static_cast<int>(std::lround(target_r - cr));
  out.shift_col = static_cast<int>(std::lround(target_c - cc));
  out.frame = translate(frame, out.shift_row, out.shift_col, out_height, out_width);
  return out;
}

ImageFrame gaussian_blur(const ImageFrame& frame, double sigma) {
  if (!(sigma > 0.0)) return frame;
  const int H = frame.height(), W = frame.width(), C = frame.channels();
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double z = 0.0;
  for (int i = -radius; i <= radius; ++i) z += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= z;
  ImageFrame tmp(H, W, C, frame.timestamp());
  ImageFrame out(H, W, C, frame.timestamp());
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      for (int ch = 0; ch < C; ++ch) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += k[static_cast<std::size_t>(i + radius)] * frame.at(r, std::clamp(c + i, 0, W - 1), ch);
        tmp.at(r, c, ch) = s;
      }
    }
  }
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      for (int ch = 0; ch < C; ++ch) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += k[static_cast<std::size_t>(i + radius)] * tmp.at(std::clamp(r + i, 0, H - 1), c, ch);
        out.at(r, c, ch) = s;
      }
    }
  }
  return out;
}

}  // namespace nailforce::imaging
