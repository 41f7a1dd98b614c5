#include "nailforce/sync.hpp"

#include <algorithm>
#include <cmath>

namespace nailforce::sync {

void BinarySignal::validate() const {
  if (!(rate > 0.0)) throw Error(ErrorKind::InvalidInput, "signal rate must be > 0");
  for (int s : samples) {
    if (s != 0 && s != 1) {
      throw Error(ErrorKind::InvalidInput, "binary signal values must be 0/1");
    }
  }
}

namespace {

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * (v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - lo) * (v[hi] - v[lo]);
}

bool is_constant(std::span<const int> s) {
  return std::adjacent_find(s.begin(), s.end(), std::not_equal_to<>()) == s.end();
}

}  // namespace

BinarySignal extract_led(std::span<const ImageFrame> frames, const Roi& roi,
                         double rate) {
  if (frames.empty()) throw Error(ErrorKind::NoSignal, "extract_led: no frames");
  std::vector<double> means;
  means.reserve(frames.size());
  for (const auto& f : frames) {
    if (roi.row < 0 || roi.col < 0 || roi.height <= 0 || roi.width <= 0 ||
        roi.row + roi.height > f.height() || roi.col + roi.width > f.width()) {
      throw Error(ErrorKind::InvalidInput, "extract_led: roi outside frame");
    }
    double acc = 0.0;
    for (int r = roi.row; r < roi.row + roi.height; ++r) {
      for (int c = roi.col; c < roi.col + roi.width; ++c) {
        for (int ch = 0; ch < f.channels(); ++ch) acc += f.at(r, c, ch);
      }
    }
    means.push_back(acc / (roi.height * roi.width * f.channels()));
  }
  const double p10 = percentile(means, 0.10);
  const double p90 = percentile(means, 0.90);
  if (p90 - p10 < 1e-6) {
    throw Error(ErrorKind::NoSignal, "extract_led: LED region intensity is constant");
  }
  const double threshold = 0.5 * (p10 + p90);
  BinarySignal out{{}, rate};
  out.samples.reserve(means.size());
  for (double m : means) out.samples.push_back(m > threshold ? 1 : 0);
  return out;
}

BinarySignal resample(const BinarySignal& signal, double target_rate) {
  if (!(target_rate > 0.0)) {
    throw Error(ErrorKind::InvalidInput, "resample: target rate must be > 0");
  }
  signal.validate();
  const std::size_t n = signal.samples.size();
  BinarySignal out{{}, target_rate};
  if (n == 0) return out;
  const auto m = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) / signal.rate * target_rate));
  out.samples.resize(m);
  const double ratio = signal.rate / target_rate;
  for (std::size_t i = 0; i < m; ++i) {
    const double x = static_cast<double>(i) * ratio;
    // nearest index, ties toward the earlier sample
    auto idx = static_cast<long long>(std::ceil(x - 0.5 - 1e-9));
    idx = std::clamp<long long>(idx, 0, static_cast<long long>(n) - 1);
    out.samples[i] = signal.samples[static_cast<std::size_t>(idx)];
  }
  return out;
}

std::vector<int> shift(std::span<const int> a, int k, int fill) {
  const int n = static_cast<int>(a.size());
  std::vector<int> out(a.size(), fill);
  for (int i = 0; i < n; ++i) {
    const int j = i - k;
    if (j >= 0 && j < n) out[i] = a[j];
  }
  return out;
}

OffsetEstimate find_offset(const BinarySignal& a, const BinarySignal& b,
                           int max_lag) {
  a.validate();
  b.validate();
  if (std::abs(a.rate - b.rate) > 1e-9 * a.rate) {
    throw Error(ErrorKind::InvalidInput, "find_offset: rates differ, resample first");
  }
  if (is_constant(a.samples) || is_constant(b.samples)) {
    throw Error(ErrorKind::NoSignal, "find_offset: constant signal");
  }
  const int na = static_cast<int>(a.samples.size());
  const int nb = static_cast<int>(b.samples.size());
  max_lag = std::max(max_lag, 0);

  OffsetEstimate best{0, -2.0};
  for (int lag = -max_lag; lag <= max_lag; ++lag) {
    const int lo = std::max(0, lag);
    const int hi = std::min(nb, na + lag);
    const int n = hi - lo;
    if (n < 2) continue;
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    for (int i = lo; i < hi; ++i) {
      const double x = a.samples[i - lag];
      const double y = b.samples[i];
      sa += x;
      sb += y;
      saa += x * x;
      sbb += y * y;
      sab += x * y;
    }
    const double va = saa - sa * sa / n;
    const double vb = sbb - sb * sb / n;
    double score = 0.0;
    if (va > 0 && vb > 0) {
      score = std::clamp((sab - sa * sb / n) / std::sqrt(va * vb), -1.0, 1.0);
    }
    const bool better = score > best.score + 1e-12 ||
                        (std::abs(score - best.score) <= 1e-12 &&
                         std::abs(lag) < std::abs(best.lag));
    if (better) best = {lag, score};
  }
  return best;
}

Wrench interpolate_wrench(std::span<const Wrench> w, double t) {
  if (w.empty()) throw Error(ErrorKind::InvalidInput, "interpolate_wrench: empty stream");
  if (t <= w.front().timestamp) {
    Wrench out = w.front();
    out.timestamp = t;
    return out;
  }
  if (t >= w.back().timestamp) {
    Wrench out = w.back();
    out.timestamp = t;
    return out;
  }
  const auto it = std::upper_bound(
      w.begin(), w.end(), t,
      [](double v, const Wrench& x) { return v < x.timestamp; });
  const Wrench& hi = *it;
  const Wrench& lo = *(it - 1);
  const double a = (t - lo.timestamp) / (hi.timestamp - lo.timestamp);
  Wrench out;
  out.timestamp = t;
  for (int k = 0; k < 3; ++k) {
    out.f[k] = lo.f[k] + a * (hi.f[k] - lo.f[k]);
    out.tau[k] = lo.tau[k] + a * (hi.tau[k] - lo.tau[k]);
  }
  return out;
}

SyncResult synchronize_trial(Trial& trial, double max_lag_s) {
  if (trial.frames.empty() || trial.wrenches.empty()) {
    throw Error(ErrorKind::InvalidInput, "synchronize_trial: empty streams");
  }
  if (trial.led_video.size() != trial.frames.size() ||
      trial.led_force.size() != trial.wrenches.size()) {
    throw Error(ErrorKind::NoSignal, "synchronize_trial: LED logs missing");
  }
  const double fr = trial.frame_rate();
  const double force_rate = trial.force_rate();
  if (!(fr > 0) || !(force_rate > 0)) {
    throw Error(ErrorKind::InvalidInput, "synchronize_trial: need >= 2 samples per stream");
  }
  const BinarySignal video{trial.led_video, fr};
  const BinarySignal force = resample(BinarySignal{trial.led_force, force_rate}, fr);

  SyncResult result;
  result.estimate = find_offset(force, video, static_cast<int>(std::lround(max_lag_s * fr)));
  const double cam_t0 = trial.frames.front().timestamp();
  const double force_t0 = trial.wrenches.front().timestamp;
  result.offset_s = -result.estimate.lag / fr - (cam_t0 - force_t0);

  result.frame_labels.reserve(trial.frames.size());
  for (auto& f : trial.frames) {
    f.set_timestamp(f.timestamp() + result.offset_s);
    result.frame_labels.push_back(interpolate_wrench(trial.wrenches, f.timestamp()));
  }
  return result;
}

}  // namespace nailforce::sync
