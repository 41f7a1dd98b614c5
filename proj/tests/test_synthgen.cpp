#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "nailforce/calibration.hpp"
#include "nailforce/dataset_io.hpp"
#include "nailforce/imaging.hpp"
#include "nailforce/sync.hpp"
#include "nailforce/synthgen.hpp"

using namespace nailforce;
using namespace nailforce::synth;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig c;
  c.n_participants = 1;
  c.weights = {330};
  c.surfaces = {1};
  c.repetitions = 1;
  c.image_height = 56;
  c.image_width = 53;
  return c;
}

}  // namespace

TEST_CASE("static phase balance and equal grip") {
  GeneratorConfig c;
  for (int w : {165, 330, 660}) {
    for (int s : {1, 3, 6, 12}) {
      Rng rng = derive_rng(5, static_cast<std::uint64_t>(w * 100 + s));
      const SampledProfile p = generate_wrench_profile(c, w, surface_by_id(s), rng);
      const double weight = w / 1000.0 * 9.82;
      int in_static = 0;
      for (std::size_t k = 0; k < p.index.size(); ++k) {
        CHECK(p.index[k].f[2] == p.thumb[k].f[2]);
        const double t = p.index[k].timestamp;
        if (p.profile.phase_at(t) == Phase::Static) {
          ++in_static;
          CHECK(std::abs(p.index[k].f[0] + p.thumb[k].f[0] - weight) < 1e-9);
        }
        for (const auto* wr : {&p.index[k], &p.thumb[k]}) {
          CHECK(validate_ranges(TargetVector::from(*wr, 0, 0)).empty());
        }
      }
      CHECK(in_static > 50);
    }
  }
}

TEST_CASE("330 g static balance value") {
  GeneratorConfig c;
  Rng rng(3);
  const auto p = generate_wrench_profile(c, 330, surface_by_id(2), rng);
  const double t = 0.5 * (p.profile.static_begin() + p.profile.static_end());
  const double sum = p.profile.at(t, Finger::Index).f[0] + p.profile.at(t, Finger::Thumb).f[0];
  CHECK(std::abs(sum - 3.2406) < 1e-9);
}

TEST_CASE("silk raises the grip ratio and heavy silk grips approach 15 N") {
  GeneratorConfig c;
  double max_silk = 0.0;
  for (int i = 0; i < 50; ++i) {
    Rng a(100 + i), b(100 + i);
    const auto sand = make_wrench_profile(c, 660, surface_by_id(1), a);
    const auto silk = make_wrench_profile(c, 660, surface_by_id(12), b);
    CHECK(silk.grip_static > sand.grip_static);
    max_silk = std::max(max_silk, silk.grip_static + silk.grip_overshoot);
    CHECK(silk.grip_static + silk.grip_overshoot <= 15.0);
  }
  CHECK(max_silk > 11.0);
}

TEST_CASE("short trial duration is a config error") {
  GeneratorConfig c;
  c.trial_duration = 4.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c.trial_duration = 6.0;
  c.frame_rate = 200.0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("trial counts") {
  GeneratorConfig c;
  c.n_participants = 1;
  CHECK(c.trial_count() == 180);
  CHECK(enumerate_trials(c).size() == 180);
  c.include_thumb = true;
  CHECK(enumerate_trials(c).size() == 360);
}

TEST_CASE("render: zero target is the base template; blue force invariant; determinism") {
  const ParticipantStyle st = make_style(9, 1, Finger::Index, 0, 0.0);
  RenderOptions o;
  o.height = 56;
  o.width = 53;
  Rng r1(1);
  const ImageFrame zero = render_nail_frame(TargetVector{}, st, o, r1);
  const double cr = 27.5, cc = 26.0;
  for (int r = 0; r < o.height; ++r) {
    for (int c = 0; c < o.width; ++c) {
      if (!inside_nail(st, o.height, o.width, r, c, cr, cc)) {
        CHECK(zero.at(r, c, 0) == doctest::Approx(st.background_rgb[0]));
        continue;
      }
      const double u = (r - cr) / (st.semi_axis_rows * o.height);
      const double v = (c - cc) / (st.semi_axis_cols * o.width);
      double tex = 0;
      for (const auto& w : st.texture_rg) tex += w.amp * std::sin(w.ku * u + w.kv * v + w.phase);
      CHECK(std::abs(zero.at(r, c, 1) - (st.nail_rgb[1] + tex)) < 1e-12);
    }
  }
  TargetVector a, b;
  a[Component::Fz] = 3.0;
  b[Component::Fz] = 4.0;
  Rng ra(2), rb(2);
  const ImageFrame ia = render_nail_frame(a, st, o, ra), ib = render_nail_frame(b, st, o, rb);
  double dg = 0.0, db = 0.0;
  for (int r = 0; r < o.height; ++r) {
    for (int c = 0; c < o.width; ++c) {
      dg += std::abs(ia.at(r, c, 1) - ib.at(r, c, 1));
      db += std::abs(ia.at(r, c, 2) - ib.at(r, c, 2));
    }
  }
  CHECK(dg > 0.0);
  CHECK(db == 0.0);
  o.noise_sigma = 0.02;
  Rng n1(4), n2(4);
  const ImageFrame x1 = render_nail_frame(a, st, o, n1), x2 = render_nail_frame(a, st, o, n2);
  CHECK(std::equal(x1.data().begin(), x1.data().end(), x2.data().begin()));
}

TEST_CASE("oracle inverse recovers noiseless targets") {
  const ParticipantStyle st = make_style(9, 2, Finger::Index, 0, 0.0);
  RenderOptions o;
  o.height = 56;
  o.width = 53;
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    TargetVector t;
    for (std::size_t k = 0; k < kTargetDim; ++k) {
      t[k] = std::uniform_real_distribution<double>(kTargetRanges[k].lo, kTargetRanges[k].hi)(rng);
    }
    const ImageFrame img = render_nail_frame(t, st, o, rng);
    const TargetVector back = invert_render(img, st);
    for (std::size_t k = 0; k < kTargetDim; ++k) {
      CHECK(std::abs(back[k] - t[k]) < 1e-6 * component_scale(k));
    }
  }
}

TEST_CASE("generated trial: frames, ranges, LED, sync and calibration") {
  GeneratorConfig c = small_config();
  const auto ids = enumerate_trials(c);
  GeneratedTrial g = generate_trial(c, ids[0]);
  CHECK(g.trial.frames.size() == 144);
  CHECK(g.trial.wrenches.size() == 600);
  CHECK_NOTHROW(g.trial.validate());
  for (const auto& t : g.truth.frame_targets) CHECK(validate_ranges(t).empty());

  // segmentation against the exact mask
  const ParticipantStyle st = make_style(c.seed, 1, Finger::Index, 0, c.session_drift);
  for (std::size_t i = 0; i < g.trial.frames.size(); i += 20) {
    const imaging::Mask seg = imaging::segment_nail(g.trial.frames[i]);
    const imaging::Mask truth = observation_mask(st, g.truth.geometry[i], c.image_height, c.image_width);
    CHECK(imaging::intersection_over_union(seg, truth) >= 0.9);
  }

  // LED extraction
  const LedPatch led;
  const sync::BinarySignal v = sync::extract_led(
      g.trial.frames, {led.row, led.col, led.size, led.size}, c.frame_rate);
  CHECK(v.samples == g.trial.led_video);

  // offset recovery
  Trial t = g.trial;
  const sync::SyncResult s = sync::synchronize_trial(t);
  CHECK(std::abs(s.offset_s - c.true_camera_offset) <= 0.005);

  // torque calibration against the fingertip torques
  const auto cal = calib::calibrate_trial_torques(g.trial.wrenches, c.force_rate, g.trial.surface);
  CHECK(std::abs(cal.contact.x - g.truth.contact.x) < 1e-6);
  CHECK(std::abs(cal.contact.y - g.truth.contact.y) < 1e-6);
  double worst = 0.0;
  for (std::size_t k = 0; k < cal.wrenches.size(); ++k) {
    for (int a = 0; a < 3; ++a) {
      worst = std::max(worst, std::abs(cal.wrenches[k].tau[a] - g.truth.tip_wrenches[k].tau[a]));
    }
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("zero camera offset gives identical LED streams after resampling") {
  GeneratorConfig c = small_config();
  c.true_camera_offset = 0.0;
  const GeneratedTrial g = generate_trial(c, enumerate_trials(c)[0]);
  const sync::BinarySignal f = sync::resample({g.trial.led_force, c.force_rate}, c.frame_rate);
  std::vector<int> head(f.samples.begin(), f.samples.begin() + static_cast<long>(g.trial.led_video.size()));
  CHECK(head == g.trial.led_video);
}

TEST_CASE("generation is deterministic and round-trips through disk") {
  GeneratorConfig c = small_config();
  const auto id = enumerate_trials(c)[0];
  const GeneratedTrial a = generate_trial(c, id), b = generate_trial(c, id);
  CHECK(std::equal(a.trial.frames[7].data().begin(), a.trial.frames[7].data().end(),
                   b.trial.frames[7].data().begin()));
  const auto dir = std::filesystem::temp_directory_path() / "nailforce_synth_rt";
  std::filesystem::remove_all(dir);
  io::write_trial(dir.string(), a.trial);
  const Trial r = io::read_trial(dir.string());
  CHECK(r.frames.size() == a.trial.frames.size());
  CHECK(r.wrenches.size() == a.trial.wrenches.size());
  CHECK(r.led_video == a.trial.led_video);
  CHECK(r.surface.id == a.trial.surface.id);
  double worst = 0.0;
  for (std::size_t i = 0; i < r.frames[3].data().size(); ++i) {
    worst = std::max(worst, std::abs(r.frames[3].data()[i] - a.trial.frames[3].data()[i]));
  }
  CHECK(worst <= 0.5 / 65535.0 + 1e-12);
  CHECK(r.wrenches[100].f[2] == doctest::Approx(a.trial.wrenches[100].f[2]).epsilon(1e-12));
  std::filesystem::remove_all(dir);
}
