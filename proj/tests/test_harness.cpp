#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "nailforce/harness.hpp"

using namespace nailforce;
using namespace nailforce::harness;

namespace {

std::vector<TrialKey> grid_keys(int participants, int sessions, int reps) {
  std::vector<TrialKey> keys;
  for (int p = 1; p <= participants; ++p) {
    for (int s = 0; s < sessions; ++s) {
      for (int w : {165, 330, 660}) {
        for (int surf = 1; surf <= 12; ++surf) {
          for (int r = 0; r < reps; ++r) keys.push_back({p, s, w, surf, r});
        }
      }
    }
  }
  return keys;
}

std::size_t count(const std::vector<SplitTag>& tags, SplitTag t) {
  return static_cast<std::size_t>(std::count(tags.begin(), tags.end(), t));
}

double linear_quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * (sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - lo) * (sorted[hi] - sorted[lo]);
}

}  // namespace

TEST_CASE("rmse") {
  const std::vector<double> a{1.0, 2.0, 3.0}, b{1.0, 2.0, 6.0};
  CHECK(rmse(a, a) == 0.0);
  CHECK(rmse(a, b) == doctest::Approx(std::sqrt(3.0)));
  CHECK_THROWS_AS(rmse(a, std::vector<double>{1.0}), Error);
}

TEST_CASE("percentile binned rmse") {
  // identical truth: every bin holds every sample
  const std::vector<double> same(10, 4.0);
  std::vector<double> pred(10);
  for (int i = 0; i < 10; ++i) pred[i] = 4.0 + 0.1 * i;
  const auto flat = percentile_binned_rmse(pred, same);
  for (const auto& b : flat) {
    CHECK(b.count == 10);
    CHECK(b.mean_truth == 4.0);
    CHECK(b.rmse == doctest::Approx(rmse(pred, same)));
  }

  // random instance against a sort-and-bucket oracle
  Rng rng(12);
  std::normal_distribution<double> n(0.0, 1.0);
  const std::size_t N = 1000;
  std::vector<double> truth(N), p(N);
  for (std::size_t i = 0; i < N; ++i) {
    truth[i] = n(rng) * 3.0;
    p[i] = truth[i] + n(rng) * 0.5;
  }
  std::vector<double> sorted = truth;
  std::sort(sorted.begin(), sorted.end());
  const auto bins = percentile_binned_rmse(p, truth);
  for (int b = 0; b < kPercentileBins; ++b) {
    const double lo = linear_quantile(sorted, std::max(0.0, 5.0 * b - 2.5) / 100.0);
    const double hi = linear_quantile(sorted, std::min(100.0, 5.0 * b + 2.5) / 100.0);
    double se = 0.0, st = 0.0;
    std::size_t c = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (truth[i] < lo || truth[i] > hi) continue;
      se += (p[i] - truth[i]) * (p[i] - truth[i]);
      st += truth[i];
      ++c;
    }
    REQUIRE(c > 0);
    CHECK(bins[b].percentile == 5.0 * b);
    CHECK(bins[b].count == c);
    CHECK(bins[b].rmse == doctest::Approx(std::sqrt(se / c)));
    CHECK(bins[b].mean_truth == doctest::Approx(st / c));
  }

  // sparse data: each bin still reports its nearest sample
  const std::vector<double> t3{0.0, 1.0, 2.0}, p3{0.5, 1.0, 2.0};
  for (const auto& b : percentile_binned_rmse(p3, t3)) CHECK(b.count >= 1);
}

TEST_CASE("derived quantities") {
  TargetVector t;
  t[Component::Fx] = 3.0;
  t[Component::Fy] = 4.0;
  t[Component::Fz] = 12.0;
  const auto d = derived_quantities(t);
  CHECK(d.magnitude == doctest::Approx(13.0));
  CHECK(d.tangential == doctest::Approx(5.0));
  CHECK(d.angle_deg == doctest::Approx(std::atan2(5.0, 12.0) * 180.0 / M_PI));
  REQUIRE(d.ratio.has_value());
  CHECK(*d.ratio == doctest::Approx(2.4));
  t[Component::Fx] = 0.1;
  t[Component::Fy] = 0.0;
  CHECK_FALSE(derived_quantities(t).ratio.has_value());
}

TEST_CASE("split schemes") {
  Rng rng(3);
  const auto keys = grid_keys(5, 1, 5);
  REQUIRE(keys.size() == 900);
  SplitScheme hold;
  const auto tags = make_splits(keys, hold, rng);
  CHECK(count(tags, SplitTag::Test) == 180);
  CHECK(count(tags, SplitTag::Train) == 720);
  // one test repetition per combination
  std::map<std::tuple<int, int, int, int>, int> per;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (tags[i] == SplitTag::Test) ++per[{keys[i].participant, keys[i].session, keys[i].weight_g, keys[i].surface_id}];
  }
  CHECK(per.size() == 180);
  for (const auto& [k, v] : per) CHECK(v == 1);

  hold.validation_fraction = 0.25;
  const auto val = make_splits(keys, hold, rng);
  CHECK(count(val, SplitTag::Test) == 180);
  CHECK(count(val, SplitTag::Validation) == 180);
  CHECK(count(val, SplitTag::Train) == 540);

  SplitScheme surf;
  surf.kind = SchemeKind::SurfaceCross;
  const auto st = make_splits(keys, surf, rng);
  CHECK(count(st, SplitTag::Test) == 75);
  for (std::size_t i = 0; i < keys.size(); ++i) CHECK((st[i] == SplitTag::Test) == (keys[i].surface_id == 3));

  SplitScheme part;
  part.kind = SchemeKind::ParticipantCross;
  const auto pt = make_splits(keys, part, rng);
  for (std::size_t i = 0; i < keys.size(); ++i) CHECK((pt[i] == SplitTag::Test) == (keys[i].participant == 3));

  SplitScheme time;
  time.kind = SchemeKind::TimeCross;
  CHECK_THROWS_AS(make_splits(keys, time, rng), Error);
  const auto two = grid_keys(2, 2, 2);
  const auto tt = make_splits(two, time, rng);
  for (std::size_t i = 0; i < two.size(); ++i) CHECK((tt[i] == SplitTag::Test) == (two[i].session == 1));

  const auto single = grid_keys(1, 1, 1);
  try {
    make_splits(single, SplitScheme{}, rng);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::SchemeInfeasible);
  }

  Rng a(9), b(9);
  CHECK(make_splits(keys, SplitScheme{}, a) == make_splits(keys, SplitScheme{}, b));
}

TEST_CASE("report serialization") {
  PredictionSet p;
  Rng rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 60; ++i) {
    TargetVector t, q, s;
    for (std::size_t k = 0; k < kTargetDim; ++k) {
      t[k] = n(rng);
      q[k] = t[k] + 0.1 * n(rng);
      s[k] = 0.1;
    }
    p.truth.push_back(t);
    p.pred.push_back(q);
    p.std.push_back(s);
  }
  const EvalReport r = evaluate(p, "gp", "holdout");
  CHECK(r.n_test == 60);
  std::vector<double> a, b;
  for (int i = 0; i < 60; ++i) {
    a.push_back(p.pred[i][Component::Fy]);
    b.push_back(p.truth[i][Component::Fy]);
  }
  CHECK(r.component_rmse[1] == doctest::Approx(rmse(a, b)));
  const EvalReport back = EvalReport::from_json(r.to_json());
  CHECK(back == r);
  CHECK(r.to_csv().find("fx") != std::string::npos);
  CHECK_FALSE(r.summary().empty());
}

TEST_CASE("model save and load") {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SampleSet s;
  s.image_height = 3;
  s.image_width = 3;
  s.X.resize(25, 9);
  s.Y.resize(25, 8);
  for (int i = 0; i < 25; ++i) {
    for (int j = 0; j < 9; ++j) s.X(i, j) = u(rng);
    for (int k = 0; k < 8; ++k) s.Y(i, k) = std::sin(3.0 * s.X(i, k % 9)) + 0.01 * k;
    s.sequence.push_back(i / 5);
    s.time.push_back(i % 5);
  }
  PredictorConfig pc;
  pc.gp.max_iterations = 15;
  pc.gp.restarts = 1;
  auto model = make_predictor(pc);
  model->fit(s, nullptr);
  const auto path = (std::filesystem::temp_directory_path() / "nailforce_test_model.bin").string();
  save_model(path, *model);
  const auto loaded = load_model(path);
  CHECK(loaded->kind() == PredictorKind::GpExact);
  const ModelOutput a = model->predict(s), b = loaded->predict(s);
  CHECK((a.mean - b.mean).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.std - b.std).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_model(path), Error);
}

TEST_CASE("pipeline config parsing") {
  const auto kv = KeyValueConfig::parse(
      "scheme = surface-cross\nheld_out_surface = 5\npredictor = fitc\nframe_stride = 3\n"
      "feature_blur = 0\nn_participants = 2\nimage_height = 56\n");
  const PipelineConfig c = PipelineConfig::from(kv);
  CHECK(c.scheme.kind == SchemeKind::SurfaceCross);
  CHECK(c.scheme.held_out_surface == 5);
  CHECK(c.predictor.kind == PredictorKind::GpFitc);
  CHECK(c.frame_stride == 3);
  CHECK(c.feature_blur == 0.0);
  CHECK(c.generator.n_participants == 2);
  CHECK(c.generator.image_height == 56);
  CHECK_THROWS_AS(PipelineConfig::from(KeyValueConfig::parse("feature_blur = -1\n")), Error);
  CHECK_THROWS_AS(PipelineConfig::from(KeyValueConfig::parse("predictor = svm\n")), Error);
}

TEST_CASE("small pipeline run is deterministic") {
  PipelineConfig c;
  c.generator.n_participants = 1;
  c.generator.weights = {330};
  c.generator.surfaces = {2, 11};
  c.generator.repetitions = 3;
  c.generator.image_height = 56;
  c.generator.image_width = 53;
  c.predictor.gp.max_iterations = 10;
  c.predictor.gp.restarts = 1;
  c.frame_stride = 12;
  c.test_frame_stride = 12;
  c.alignment.spacings = {16.0, 8.0, 4.0};
  c.alignment.max_iterations = {8, 8, 8};
  c.alignment.cg_iterations = 10;
  const PipelineResult a = run_pipeline(c);
  const PipelineResult b = run_pipeline(c);
  CHECK(a.report == b.report);
  CHECK(a.test_trials.size() == 2);
  CHECK(a.report.n_test == a.predictions.pred.size());
  for (double r : a.report.component_rmse) CHECK(std::isfinite(r));
}
