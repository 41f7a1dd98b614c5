#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "nailforce/imaging.hpp"
#include "nailforce/synthgen.hpp"

using namespace nailforce;
using namespace nailforce::imaging;

namespace {

// Textbook hexcone formulas, written independently of the library.
std::array<double, 3> oracle_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), c = mx - mn;
  double h = 0.0;
  if (c > 0) {
    if (mx == r) {
      h = 60.0 * std::fmod((g - b) / c + 6.0, 6.0);
    } else if (mx == g) {
      h = 60.0 * ((b - r) / c + 2.0);
    } else {
      h = 60.0 * ((r - g) / c + 4.0);
    }
  }
  return {h, mx > 0 ? c / mx : 0.0, mx};
}

ImageFrame uniform_rgb(int h, int w, double r, double g, double b) {
  ImageFrame f(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      f.at(y, x, 0) = r;
      f.at(y, x, 1) = g;
      f.at(y, x, 2) = b;
    }
  }
  return f;
}

std::array<double, 2> weighted_centroid(const ImageFrame& w) {
  double s = 0, sr = 0, sc = 0;
  for (int r = 0; r < w.height(); ++r) {
    for (int c = 0; c < w.width(); ++c) {
      s += w.at(r, c);
      sr += r * w.at(r, c);
      sc += c * w.at(r, c);
    }
  }
  return {sr / s, sc / s};
}

}  // namespace

TEST_CASE("hsv conversion") {
  const Hsv red = rgb_to_hsv(1.0, 0.0, 0.0);
  CHECK(red.h == 0.0);
  CHECK(red.s == 1.0);
  CHECK(red.v == 1.0);
  const Hsv grey = rgb_to_hsv(0.5, 0.5, 0.5);
  CHECK(grey.h == 0.0);
  CHECK(grey.s == 0.0);
  CHECK(grey.v == 0.5);

  Rng rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const double r = u(rng), g = u(rng), b = u(rng);
    const Hsv h = rgb_to_hsv(r, g, b);
    const auto o = oracle_hsv(r, g, b);
    CHECK(h.h == doctest::Approx(o[0]).epsilon(1e-12));
    CHECK(h.s == doctest::Approx(o[1]).epsilon(1e-12));
    CHECK(h.v == doctest::Approx(o[2]).epsilon(1e-12));
    CHECK(h.h >= 0.0);
    CHECK(h.h < 360.0);
    const auto back = hsv_to_rgb(h);
    CHECK(std::abs(back[0] - r) < 1e-6);
    CHECK(std::abs(back[1] - g) < 1e-6);
    CHECK(std::abs(back[2] - b) < 1e-6);
  }
  CHECK_THROWS_AS(rgb_to_hsv(ImageFrame(3, 3, 1)), Error);
  const ImageFrame f = uniform_rgb(2, 3, 0.2, 0.7, 0.4);
  const ImageFrame g = hsv_to_rgb(rgb_to_hsv(f));
  for (std::size_t i = 0; i < f.data().size(); ++i) CHECK(std::abs(f.data()[i] - g.data()[i]) < 1e-12);
}

TEST_CASE("segmentation") {
  const SegmentationConfig cfg;
  // hue 10 deg, saturation 0.5: inside the default bands
  const auto in = hsv_to_rgb(Hsv{10.0, 0.5, 0.8});
  const Mask full = segment_nail(uniform_rgb(12, 9, in[0], in[1], in[2]), cfg);
  CHECK(full.count() == 12u * 9u);
  const auto out = hsv_to_rgb(Hsv{200.0, 0.5, 0.8});
  CHECK(segment_nail(uniform_rgb(12, 9, out[0], out[1], out[2]), cfg).empty());

  // largest 4-connected component wins; diagonal contact does not connect
  ImageFrame two = uniform_rgb(10, 10, out[0], out[1], out[2]);
  auto paint = [&](int r, int c) {
    for (int k = 0; k < 3; ++k) two.at(r, c, k) = in[k];
  };
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) paint(r, c);
  }
  for (int r = 3; r < 10; ++r) {
    for (int c = 3; c < 6; ++c) paint(r, c);
  }
  const Mask big = segment_nail(two, cfg);
  CHECK(big.count() == 21u);
  CHECK_FALSE(big.at(0, 0));
  CHECK(big.at(3, 3));

  for (int p = 1; p <= 3; ++p) {
    const synth::ParticipantStyle st = synth::make_style(4, p, Finger::Index, 0, 0.0);
    Rng rng = derive_rng(31, static_cast<std::uint64_t>(p));
    synth::FrameGeometry geo;
    geo.warp = synth::random_warp(111, 105, 1.5, 32.0, rng);
    geo.shift_row = 3 * p - 5;
    geo.shift_col = 4 - 2 * p;
    TargetVector t;
    t[Component::Fz] = 4.0;
    t[Component::Fx] = 1.0;
    const ImageFrame img = synth::render_observation(t, st, geo, 111, 105, 1, 0.02, rng);
    const Mask m = segment_nail(img, cfg);
    CHECK(intersection_over_union(m, synth::observation_mask(st, geo, 111, 105)) >= 0.9);
    // idempotent on the masked frame
    CHECK(segment_nail(apply_mask(img, m), cfg) == m);
  }
}

TEST_CASE("mean shift") {
  const ImageFrame flat = uniform_rgb(40, 40, 1, 1, 1).channel(0);
  const TrackState init{20.0, 20.0, 11, 11};
  const TrackResult u = mean_shift_track(flat, init);
  CHECK(u.iterations == 1);
  CHECK(u.state.row == doctest::Approx(20.0));
  CHECK(u.state.col == doctest::Approx(20.0));

  ImageFrame spike(40, 40, 1);
  spike.at(23, 17) = 1.0;
  const TrackResult s = mean_shift_track(spike, init);
  CHECK_FALSE(s.lost);
  CHECK(s.state.row == doctest::Approx(23.0));
  CHECK(s.state.col == doctest::Approx(17.0));

  ImageFrame blob(60, 60, 1);
  for (int r = 0; r < 60; ++r) {
    for (int c = 0; c < 60; ++c) {
      blob.at(r, c) = std::exp(-((r - 33.0) * (r - 33.0) + (c - 28.0) * (c - 28.0)) / (2 * 3.0 * 3.0));
    }
  }
  const auto truth = weighted_centroid(blob);
  const TrackResult b = mean_shift_track(blob, TrackState{30.0, 24.0, 21, 21}, 0.01, 100);
  CHECK(std::hypot(b.state.row - truth[0], b.state.col - truth[1]) < 0.5);
  for (std::size_t i = 1; i < b.shifts.size(); ++i) CHECK(b.shifts[i] <= b.shifts[i - 1] + 1e-12);

  const TrackResult lost = mean_shift_track(ImageFrame(30, 30, 1), TrackState{15, 15, 7, 7});
  CHECK(lost.lost);
  CHECK(lost.state.row == 15.0);
  CHECK(lost.state.col == 15.0);
}

TEST_CASE("centering") {
  ImageFrame f(21, 19, 3);
  Mask m(21, 19);
  auto fill = [&](int r0, int c0) {
    f = ImageFrame(21, 19, 3);
    m = Mask(21, 19);
    for (int r = r0 - 2; r <= r0 + 2; ++r) {
      for (int c = c0 - 3; c <= c0 + 3; ++c) {
        m.set(r, c, true);
        for (int k = 0; k < 3; ++k) f.at(r, c, k) = 0.1 * (k + 1) + 0.01 * r + 0.001 * c;
      }
    }
  };
  fill(10, 9);
  const CenteredFrame same = center_nail(f, m, 21, 19);
  CHECK(same.shift_row == 0);
  CHECK(same.shift_col == 0);
  CHECK(std::equal(same.frame.data().begin(), same.frame.data().end(), f.data().begin()));

  fill(13, 7);
  const CenteredFrame moved = center_nail(f, m, 21, 19);
  CHECK(moved.shift_row == -3);
  CHECK(moved.shift_col == 2);
  const Mask mm = translate(m, moved.shift_row, moved.shift_col, 21, 19);
  const auto c = mm.centroid();
  CHECK(std::abs(c[0] - 10.0) <= 0.5);
  CHECK(std::abs(c[1] - 9.0) <= 0.5);
  // pixel multiset preserved when nothing leaves the canvas
  std::vector<double> a(f.data().begin(), f.data().end()), b(moved.frame.data().begin(), moved.frame.data().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);

  CHECK_THROWS_AS(center_nail(f, Mask(21, 19), 21, 19), Error);
  try {
    center_nail(f, Mask(21, 19), 21, 19);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::CannotCenter);
  }

  // generator frame: centering removes at least the integer part of the shift
  const synth::ParticipantStyle st = synth::make_style(4, 1, Finger::Index, 0, 0.0);
  Rng rng(8);
  synth::FrameGeometry geo;
  geo.warp = align::FfdTransform(111, 105, {32.0, 16.0, 8.0});
  geo.shift_row = 4;
  geo.shift_col = -3;
  const ImageFrame img = synth::render_observation(TargetVector{}, st, geo, 111, 105, 0, 0.0, rng);
  const CenteredFrame cf = center_nail(img, segment_nail(img), 111, 105);
  CHECK(std::abs(cf.shift_row + geo.shift_row) <= 1);
  CHECK(std::abs(cf.shift_col + geo.shift_col) <= 1);
  const Mask canon = synth::canonical_mask(st, 111, 105);
  CHECK(intersection_over_union(segment_nail(cf.frame), canon) >= 0.9);
}

TEST_CASE("gaussian blur") {
  const ImageFrame c = uniform_rgb(9, 8, 0.3, 0.6, 0.9);
  const ImageFrame b = gaussian_blur(c, 1.3);
  for (std::size_t i = 0; i < c.data().size(); ++i) CHECK(b.data()[i] == doctest::Approx(c.data()[i]).epsilon(1e-12));
  CHECK(gaussian_blur(c, 0.0).data().size() == c.data().size());

  ImageFrame d(21, 21, 1);
  d.at(10, 10) = 1.0;
  const double sigma = 1.5;
  const ImageFrame g = gaussian_blur(d, sigma);
  double z = 0.0;
  for (int i = -5; i <= 5; ++i) z += std::exp(-0.5 * i * i / (sigma * sigma));
  for (int r = 6; r <= 14; ++r) {
    for (int col = 6; col <= 14; ++col) {
      const double dr = r - 10, dc = col - 10;
      const double expect = std::exp(-0.5 * (dr * dr + dc * dc) / (sigma * sigma)) / (z * z);
      CHECK(g.at(r, col) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  double sum = 0.0;
  for (double x : g.data()) sum += x;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}
