#include "nailforce/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "nailforce/calibration.hpp"
#include "nailforce/dataset_io.hpp"
#include "nailforce/postprocess.hpp"
#include "nailforce/sync.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace nailforce::harness {

// ------------------------------------------------------------------ names

std::string_view to_string(SchemeKind k) {
  switch (k) {
    case SchemeKind::PerCombinationHoldout: return "holdout";
    case SchemeKind::SurfaceCross: return "surface-cross";
    case SchemeKind::TimeCross: return "time-cross";
    case SchemeKind::ParticipantCross: return "participant-cross";
    case SchemeKind::SingleModelAll: return "single-model-all";
  }
  return "?";
}

SchemeKind scheme_from_string(std::string_view s) {
  for (auto k : {SchemeKind::PerCombinationHoldout, SchemeKind::SurfaceCross, SchemeKind::TimeCross,
                 SchemeKind::ParticipantCross, SchemeKind::SingleModelAll}) {
    if (s == to_string(k)) return k;
  }
  throw Error(ErrorKind::Config, "unknown split scheme '" + std::string(s) + "'");
}

std::string_view to_string(PredictorKind k) {
  switch (k) {
    case PredictorKind::GpExact: return "gp";
    case PredictorKind::GpFitc: return "fitc";
    case PredictorKind::Cnn: return "cnn";
    case PredictorKind::NnFd: return "nnfd";
    case PredictorKind::RnnFd: return "rnnfd";
  }
  return "?";
}

PredictorKind predictor_from_string(std::string_view s) {
  for (auto k : {PredictorKind::GpExact, PredictorKind::GpFitc, PredictorKind::Cnn,
                 PredictorKind::NnFd, PredictorKind::RnnFd}) {
    if (s == to_string(k)) return k;
  }
  if (s == "exact") return PredictorKind::GpExact;
  throw Error(ErrorKind::Config, "unknown predictor '" + std::string(s) + "'");
}

bool is_neural(PredictorKind k) {
  return k == PredictorKind::Cnn || k == PredictorKind::NnFd || k == PredictorKind::RnnFd;
}

// ----------------------------------------------------------------- splits

namespace {

using ComboKey = std::tuple<int, int, int, int>;  // participant, session, weight, surface

ComboKey combo_of(const TrialKey& k) {
  return {k.participant, k.session, k.weight_g, k.surface_id};
}

// Validation repetitions drawn per combination among the non-test ones.
void assign_validation(std::span<const TrialKey> trials, std::vector<SplitTag>& tags,
                       double fraction, Rng& rng) {
  if (fraction <= 0.0) return;
  std::map<ComboKey, std::set<int>> reps;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    if (tags[i] == SplitTag::Train) reps[combo_of(trials[i])].insert(trials[i].repetition);
  }
  std::map<ComboKey, std::set<int>> chosen;
  for (auto& [key, set] : reps) {
    std::vector<int> v(set.begin(), set.end());
    const auto m = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(v.size())));
    if (m >= v.size()) continue;  // keep at least one training repetition
    std::shuffle(v.begin(), v.end(), rng);
    chosen[key].insert(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(m));
  }
  for (std::size_t i = 0; i < trials.size(); ++i) {
    if (tags[i] != SplitTag::Train) continue;
    auto it = chosen.find(combo_of(trials[i]));
    if (it != chosen.end() && it->second.count(trials[i].repetition)) tags[i] = SplitTag::Validation;
  }
}

}  // namespace

std::vector<SplitTag> make_splits(std::span<const TrialKey> trials, const SplitScheme& scheme,
                                  Rng& rng) {
  if (trials.empty()) throw Error(ErrorKind::SchemeInfeasible, "make_splits: no trials");
  if (scheme.validation_fraction < 0.0 || scheme.validation_fraction >= 1.0) {
    throw Error(ErrorKind::Config, "validation_fraction must be in [0,1)");
  }
  std::vector<SplitTag> tags(trials.size(), SplitTag::Train);
  auto held_out = [&](auto pred, const std::string& what) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < trials.size(); ++i) {
      if (pred(trials[i])) {
        tags[i] = SplitTag::Test;
        ++n;
      }
    }
    if (n == 0) throw Error(ErrorKind::SchemeInfeasible, "no trial has " + what);
    if (n == trials.size()) throw Error(ErrorKind::SchemeInfeasible, "every trial has " + what);
  };
  switch (scheme.kind) {
    case SchemeKind::PerCombinationHoldout:
    case SchemeKind::SingleModelAll: {
      std::map<ComboKey, std::set<int>> reps;
      for (const auto& t : trials) reps[combo_of(t)].insert(t.repetition);
      std::map<ComboKey, int> test_rep;
      for (const auto& [key, set] : reps) {
        if (static_cast<int>(set.size()) < scheme.min_repetitions) {
          std::ostringstream m;
          m << "combination (participant " << std::get<0>(key) << ", session " << std::get<1>(key)
            << ", " << std::get<2>(key) << " g, surface " << std::get<3>(key) << ") has "
            << set.size() << " repetitions, need " << scheme.min_repetitions;
          throw Error(ErrorKind::SchemeInfeasible, m.str());
        }
        std::vector<int> v(set.begin(), set.end());
        test_rep[key] = v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
      }
      for (std::size_t i = 0; i < trials.size(); ++i) {
        if (trials[i].repetition == test_rep[combo_of(trials[i])]) tags[i] = SplitTag::Test;
      }
      break;
    }
    case SchemeKind::SurfaceCross:
      held_out([&](const TrialKey& k) { return k.surface_id == scheme.held_out_surface; },
               "surface " + std::to_string(scheme.held_out_surface));
      break;
    case SchemeKind::TimeCross:
      held_out([&](const TrialKey& k) { return k.session == scheme.held_out_session; },
               "session " + std::to_string(scheme.held_out_session));
      break;
    case SchemeKind::ParticipantCross:
      held_out([&](const TrialKey& k) { return k.participant == scheme.held_out_participant; },
               "participant " + std::to_string(scheme.held_out_participant));
      break;
  }
  assign_validation(trials, tags, scheme.validation_fraction, rng);
  return tags;
}

Dataset make_dataset(std::vector<TrialKey> trials, const SplitScheme& scheme, Rng& rng) {
  Dataset d;
  d.split_labels = make_splits(trials, scheme, rng);
  d.trials = std::move(trials);
  return d;
}

// ---------------------------------------------------------------- metrics

double rmse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw Error(ErrorKind::InvalidInput, "rmse: need equal, non-zero lengths");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

std::array<BinPoint, kPercentileBins> percentile_binned_rmse(std::span<const double> pred,
                                                             std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw Error(ErrorKind::InvalidInput, "percentile_binned_rmse: need equal, non-zero lengths");
  }
  const std::size_t n = truth.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return truth[a] < truth[b]; });
  auto quantile = [&](double pct) {
    const double pos = pct / 100.0 * static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, n - 1);
    const double f = pos - static_cast<double>(lo);
    return truth[order[lo]] + f * (truth[order[hi]] - truth[order[lo]]);
  };
  std::array<BinPoint, kPercentileBins> out{};
  for (int b = 0; b < kPercentileBins; ++b) {
    const double pct = 5.0 * b;
    const double lo = quantile(std::max(0.0, pct - 2.5));
    const double hi = quantile(std::min(100.0, pct + 2.5));
    double sum_t = 0.0, sum_e = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (truth[i] >= lo && truth[i] <= hi) {
        sum_t += truth[i];
        sum_e += (pred[i] - truth[i]) * (pred[i] - truth[i]);
        ++count;
      }
    }
    if (count == 0) {
      const std::size_t i = order[static_cast<std::size_t>(std::lround(pct / 100.0 * static_cast<double>(n - 1)))];
      sum_t = truth[i];
      sum_e = (pred[i] - truth[i]) * (pred[i] - truth[i]);
      count = 1;
    }
    out[b] = {pct, sum_t / static_cast<double>(count), std::sqrt(sum_e / static_cast<double>(count)), count};
  }
  return out;
}

DerivedQuantities derived_quantities(const TargetVector& t) {
  DerivedQuantities d;
  const double fx = t[Component::Fx], fy = t[Component::Fy], fz = t[Component::Fz];
  d.tangential = std::hypot(fx, fy);
  d.magnitude = std::sqrt(fx * fx + fy * fy + fz * fz);
  d.angle_deg = std::atan2(d.tangential, fz) * 180.0 / std::numbers::pi;
  if (d.tangential >= kMinTangential) d.ratio = fz / d.tangential;
  return d;
}

EvalReport evaluate(const PredictionSet& p, const std::string& predictor, const std::string& scheme) {
  const std::size_t n = p.truth.size();
  if (n == 0 || p.pred.size() != n) throw Error(ErrorKind::InvalidInput, "evaluate: no predictions");
  EvalReport r;
  r.predictor = predictor;
  r.scheme = scheme;
  r.n_test = n;
  std::vector<double> a(n), b(n);
  for (std::size_t k = 0; k < kTargetDim; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = p.pred[i][k];
      b[i] = p.truth[i][k];
      if (p.std.size() == n) s += p.std[i][k];
    }
    r.component_rmse[k] = rmse(a, b);
    r.mean_predictive_std[k] = s / static_cast<double>(n);
    r.bins[k] = percentile_binned_rmse(a, b);
  }
  double sm = 0.0, sa = 0.0, sr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const DerivedQuantities dp = derived_quantities(p.pred[i]), dt = derived_quantities(p.truth[i]);
    sm += (dp.magnitude - dt.magnitude) * (dp.magnitude - dt.magnitude);
    sa += (dp.angle_deg - dt.angle_deg) * (dp.angle_deg - dt.angle_deg);
    if (dp.ratio && dt.ratio) {
      sr += (*dp.ratio - *dt.ratio) * (*dp.ratio - *dt.ratio);
      ++r.ratio_samples;
    }
  }
  r.magnitude_rmse = std::sqrt(sm / static_cast<double>(n));
  r.angle_rmse_deg = std::sqrt(sa / static_cast<double>(n));
  r.ratio_rmse = r.ratio_samples ? std::sqrt(sr / static_cast<double>(r.ratio_samples))
                                 : std::numeric_limits<double>::quiet_NaN();
  return r;
}

// ----------------------------------------------------------------- report

namespace {

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num_of(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}
bool same(double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); }

}  // namespace

std::string EvalReport::to_json() const {
  json j;
  j["predictor"] = predictor;
  j["scheme"] = scheme;
  j["n_train"] = n_train;
  j["n_test"] = n_test;
  json comps = json::object();
  for (std::size_t k = 0; k < kTargetDim; ++k) {
    json c;
    c["rmse"] = num(component_rmse[k]);
    c["mean_std"] = num(mean_predictive_std[k]);
    json bs = json::array();
    for (const auto& b : bins[k]) bs.push_back({num(b.percentile), num(b.mean_truth), num(b.rmse), b.count});
    c["bins"] = bs;
    comps[std::string(kComponentNames[k])] = c;
  }
  j["components"] = comps;
  j["magnitude_rmse"] = num(magnitude_rmse);
  j["angle_rmse_deg"] = num(angle_rmse_deg);
  j["ratio_rmse"] = num(ratio_rmse);
  j["ratio_samples"] = ratio_samples;
  if (static_diagnostics) {
    j["static_diagnostics"] = {{"samples", static_diagnostics->samples},
                               {"mean_abs_fz_difference", num(static_diagnostics->mean_abs_fz_difference)},
                               {"mean_abs_balance_error", num(static_diagnostics->mean_abs_balance_error)}};
  }
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  EvalReport r;
  try {
    const json j = json::parse(text);
    r.predictor = j.at("predictor").get<std::string>();
    r.scheme = j.at("scheme").get<std::string>();
    r.n_train = j.at("n_train").get<std::size_t>();
    r.n_test = j.at("n_test").get<std::size_t>();
    for (std::size_t k = 0; k < kTargetDim; ++k) {
      const json& c = j.at("components").at(std::string(kComponentNames[k]));
      r.component_rmse[k] = num_of(c.at("rmse"));
      r.mean_predictive_std[k] = num_of(c.at("mean_std"));
      const json& bs = c.at("bins");
      if (bs.size() != kPercentileBins) throw Error(ErrorKind::InvalidInput, "report: expected 21 bins");
      for (int b = 0; b < kPercentileBins; ++b) {
        r.bins[k][b] = {num_of(bs[b][0]), num_of(bs[b][1]), num_of(bs[b][2]), bs[b][3].get<std::size_t>()};
      }
    }
    r.magnitude_rmse = num_of(j.at("magnitude_rmse"));
    r.angle_rmse_deg = num_of(j.at("angle_rmse_deg"));
    r.ratio_rmse = num_of(j.at("ratio_rmse"));
    r.ratio_samples = j.at("ratio_samples").get<std::size_t>();
    if (j.contains("static_diagnostics")) {
      const json& s = j["static_diagnostics"];
      r.static_diagnostics = StaticDiagnostics{s.at("samples").get<std::size_t>(),
                                               num_of(s.at("mean_abs_fz_difference")),
                                               num_of(s.at("mean_abs_balance_error"))};
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvalidInput, std::string("report: ") + e.what());
  }
  return r;
}

std::string EvalReport::to_csv() const {
  std::ostringstream o;
  o << std::setprecision(17);
  o << "kind,component,percentile,mean_truth,rmse,count\n";
  for (std::size_t k = 0; k < kTargetDim; ++k) {
    o << "rmse," << kComponentNames[k] << ",,," << component_rmse[k] << "," << n_test << "\n";
  }
  o << "rmse,magnitude,,," << magnitude_rmse << "," << n_test << "\n";
  o << "rmse,angle_deg,,," << angle_rmse_deg << "," << n_test << "\n";
  o << "rmse,ratio,,," << ratio_rmse << "," << ratio_samples << "\n";
  for (std::size_t k = 0; k < kTargetDim; ++k) {
    for (const auto& b : bins[k]) {
      o << "bin," << kComponentNames[k] << "," << b.percentile << "," << b.mean_truth << "," << b.rmse
        << "," << b.count << "\n";
    }
  }
  return o.str();
}

std::string EvalReport::summary() const {
  std::ostringstream o;
  o << "predictor " << predictor << ", scheme " << scheme << ", train " << n_train << ", test "
    << n_test << "\n";
  o << std::left << std::setw(12) << "component" << std::setw(14) << "rmse" << "mean std\n";
  static constexpr std::array<const char*, kTargetDim> units = {"N", "N", "N", "N*mm", "N*mm", "N*mm", "1/m", "1/m"};
  for (std::size_t k = 0; k < kTargetDim; ++k) {
    std::ostringstream v;
    v << std::fixed << std::setprecision(4) << component_rmse[k] << " " << units[k];
    o << std::setw(12) << kComponentNames[k] << std::setw(14) << v.str() << std::fixed
      << std::setprecision(4) << mean_predictive_std[k] << "\n";
  }
  o << std::setw(12) << "|f|" << magnitude_rmse << " N\n";
  o << std::setw(12) << "angle" << angle_rmse_deg << " deg\n";
  o << std::setw(12) << "fz:ft" << ratio_rmse << " (" << ratio_samples << " samples)\n";
  if (static_diagnostics) {
    o << "static phase: |fz thumb - fz index| " << static_diagnostics->mean_abs_fz_difference
      << " N, |fx sum - weight| " << static_diagnostics->mean_abs_balance_error << " N over "
      << static_diagnostics->samples << " frames\n";
  }
  return o.str();
}

bool EvalReport::operator==(const EvalReport& o) const {
  if (predictor != o.predictor || scheme != o.scheme || n_train != o.n_train || n_test != o.n_test ||
      ratio_samples != o.ratio_samples || !same(magnitude_rmse, o.magnitude_rmse) ||
      !same(angle_rmse_deg, o.angle_rmse_deg) || !same(ratio_rmse, o.ratio_rmse)) {
    return false;
  }
  for (std::size_t k = 0; k < kTargetDim; ++k) {
    if (!same(component_rmse[k], o.component_rmse[k]) ||
        !same(mean_predictive_std[k], o.mean_predictive_std[k])) {
      return false;
    }
    for (int b = 0; b < kPercentileBins; ++b) {
      const auto &x = bins[k][b], &y = o.bins[k][b];
      if (!same(x.percentile, y.percentile) || !same(x.mean_truth, y.mean_truth) ||
          !same(x.rmse, y.rmse) || x.count != y.count) {
        return false;
      }
    }
  }
  if (static_diagnostics.has_value() != o.static_diagnostics.has_value()) return false;
  if (static_diagnostics) {
    const auto &a = *static_diagnostics, &b = *o.static_diagnostics;
    return a.samples == b.samples && same(a.mean_abs_fz_difference, b.mean_abs_fz_difference) &&
           same(a.mean_abs_balance_error, b.mean_abs_balance_error);
  }
  return true;
}

// ------------------------------------------------------------- predictors

SampleSet SampleSet::subset(std::span<const std::size_t> rows) const {
  SampleSet s;
  s.image_height = image_height;
  s.image_width = image_width;
  s.X.resize(static_cast<Eigen::Index>(rows.size()), X.cols());
  s.Y.resize(static_cast<Eigen::Index>(rows.size()), Y.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(rows[i]);
    s.X.row(static_cast<Eigen::Index>(i)) = X.row(r);
    s.Y.row(static_cast<Eigen::Index>(i)) = Y.row(r);
    s.sequence.push_back(sequence[rows[i]]);
    s.time.push_back(time[rows[i]]);
  }
  return s;
}

namespace {

constexpr int kOut = static_cast<int>(kTargetDim);

struct Scaler {
  std::array<double, kTargetDim> mean{}, scale{};

  static Scaler fit(const Matrix& Y) {
    Scaler s;
    const double n = static_cast<double>(Y.rows());
    for (int k = 0; k < kOut; ++k) {
      s.mean[k] = Y.col(k).mean();
      const double var = (Y.col(k).array() - s.mean[k]).square().sum() / n;
      s.scale[k] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    return s;
  }
  Matrix forward(const Matrix& Y) const {
    Matrix Z(Y.rows(), Y.cols());
    for (int k = 0; k < kOut; ++k) Z.col(k) = (Y.col(k).array() - mean[k]) / scale[k];
    return Z;
  }
  json to_json() const { return {{"mean", mean}, {"scale", scale}}; }
  static Scaler from_json(const json& j) {
    Scaler s;
    s.mean = j.at("mean").get<std::array<double, kTargetDim>>();
    s.scale = j.at("scale").get<std::array<double, kTargetDim>>();
    return s;
  }
};

void require_fitted(bool fitted) {
  if (!fitted) throw Error(ErrorKind::InvalidInput, "predictor used before fitting");
}

void require_dim(const SampleSet& s, Eigen::Index d) {
  if (s.X.cols() != d) throw Error(ErrorKind::InvalidInput, "predictor: feature dimension mismatch");
}

// Reads doubles sequentially from a payload.
struct Cursor {
  std::span<const double> data;
  std::size_t pos = 0;
  std::span<const double> take(std::size_t n) {
    if (pos + n > data.size()) throw Error(ErrorKind::Io, "model payload truncated");
    auto s = data.subspan(pos, n);
    pos += n;
    return s;
  }
  Matrix matrix(Eigen::Index r, Eigen::Index c) {
    auto s = take(static_cast<std::size_t>(r * c));
    return Eigen::Map<const Matrix>(s.data(), r, c);
  }
};

void append(std::vector<double>& out, const Matrix& m) {
  out.insert(out.end(), m.data(), m.data() + m.size());
}

// --- Gaussian processes

class GpPredictor : public Predictor {
 public:
  explicit GpPredictor(const PredictorConfig& c) : config_(c) {}

  PredictorKind kind() const override { return config_.kind; }

  void fit(const SampleSet& train, const SampleSet*) override {
    if (train.size() == 0) throw Error(ErrorKind::InvalidInput, "gp: empty training set");
    scaler_ = Scaler::fit(train.Y);
    const Matrix Z = scaler_.forward(train.Y);
    auto X = std::make_shared<const Matrix>(train.X);
    const int n = static_cast<int>(train.size());
    models_.assign(kTargetDim, {});
    const gp::KernelDistance dist = config_.gp.distance;
    if (config_.kind == PredictorKind::GpExact) {
      const Matrix D = gp::pairwise_distance(*X, *X, dist);
      parallel_for(kTargetDim, config_.jobs, [&](std::size_t k) {
        const gp::Vector y = Z.col(static_cast<Eigen::Index>(k));
        gp::OptimizerConfig oc = config_.gp;
        oc.seed = config_.seed * 131 + k;
        models_[k] = gp::fit_exact(X, D, y, gp::default_hyperparams(*X, y, dist), oc);
      });
    } else {
      const int m = std::clamp(static_cast<int>(std::lround(config_.inducing_fraction * n)), 1, n);
      Rng rng = derive_rng(config_.seed, 0x1D);
      const std::vector<int> inducing = gp::select_inducing(n, m, rng);
      parallel_for(kTargetDim, config_.jobs, [&](std::size_t k) {
        const gp::Vector y = Z.col(static_cast<Eigen::Index>(k));
        gp::OptimizerConfig oc = config_.gp;
        oc.seed = config_.seed * 131 + k;
        models_[k] = gp::fit_fitc_with(*X, y, inducing, gp::default_hyperparams(*X, y, dist), oc);
      });
    }
    dim_ = X->cols();
  }

  ModelOutput predict(const SampleSet& s) const override {
    require_fitted(!models_.empty());
    require_dim(s, dim_);
    ModelOutput out{Matrix(s.X.rows(), kOut), Matrix(s.X.rows(), kOut)};
    for (int k = 0; k < kOut; ++k) {
      const auto p = models_[k].predict(s.X);
      for (Eigen::Index i = 0; i < s.X.rows(); ++i) {
        out.mean(i, k) = p[i].mean * scaler_.scale[k] + scaler_.mean[k];
        out.std(i, k) = std::sqrt(std::max(p[i].variance, 0.0)) * scaler_.scale[k];
      }
    }
    return out;
  }

  std::string header_json() const override {
    require_fitted(!models_.empty());
    json j;
    j["kind"] = std::string(to_string(config_.kind));
    j["dim"] = dim_;
    j["scaler"] = scaler_.to_json();
    j["distance"] = models_[0].distance() == gp::KernelDistance::Squared ? "squared" : "printed";
    j["basis_rows"] = models_[0].basis().rows();
    json comps = json::array();
    for (const auto& m : models_) {
      const auto st = m.state();
      comps.push_back({{"sigma_f2", st.hp.sigma_f2},
                       {"length_scale", st.hp.length_scale},
                       {"sigma_n2", st.hp.sigma_n2},
                       {"log_likelihood", st.log_likelihood},
                       {"factor", {st.var_factor.rows(), st.var_factor.cols()}},
                       {"factor2", {st.var_factor2.rows(), st.var_factor2.cols()}},
                       {"inducing", st.inducing}});
    }
    j["components"] = comps;
    return j.dump();
  }

  std::vector<double> payload() const override {
    std::vector<double> out;
    append(out, models_[0].basis());
    for (const auto& m : models_) {
      const auto st = m.state();
      append(out, st.weights);
      append(out, st.var_factor);
      append(out, st.var_factor2);
    }
    return out;
  }

  static std::unique_ptr<Predictor> restore(const json& h, std::span<const double> payload) {
    PredictorConfig c;
    c.kind = predictor_from_string(h.at("kind").get<std::string>());
    auto p = std::make_unique<GpPredictor>(c);
    p->dim_ = h.at("dim").get<Eigen::Index>();
    p->scaler_ = Scaler::from_json(h.at("scaler"));
    const auto dist = h.at("distance") == "squared" ? gp::KernelDistance::Squared : gp::KernelDistance::AsPrinted;
    const auto rows = h.at("basis_rows").get<Eigen::Index>();
    Cursor cur{payload};
    const Matrix basis = cur.matrix(rows, p->dim_);
    for (const auto& cj : h.at("components")) {
      gp::GpModel::State st;
      st.mode = c.kind == PredictorKind::GpExact ? gp::Mode::Exact : gp::Mode::Fitc;
      st.distance = dist;
      st.hp = {cj.at("sigma_f2").get<double>(), cj.at("length_scale").get<double>(), cj.at("sigma_n2").get<double>()};
      st.log_likelihood = cj.at("log_likelihood").get<double>();
      st.basis = basis;
      st.inducing = cj.at("inducing").get<std::vector<int>>();
      const auto f1 = cj.at("factor").get<std::array<Eigen::Index, 2>>();
      const auto f2 = cj.at("factor2").get<std::array<Eigen::Index, 2>>();
      st.weights = cur.matrix(rows, 1);
      st.var_factor = cur.matrix(f1[0], f1[1]);
      st.var_factor2 = cur.matrix(f2[0], f2[1]);
      p->models_.push_back(gp::GpModel::from_state(std::move(st)));
    }
    if (p->models_.size() != kTargetDim) throw Error(ErrorKind::Io, "gp model: expected 8 components");
    return p;
  }

 private:
  PredictorConfig config_;
  Scaler scaler_;
  Eigen::Index dim_ = 0;
  std::vector<gp::GpModel> models_;
};

// --- shared neural plumbing

// Column-wise centered inputs (d x N).
Matrix centered_columns(const Matrix& X, const Eigen::VectorXd& mean) {
  Matrix T = X.transpose();
  T.colwise() -= mean;
  return T;
}

std::function<double(std::span<const double>)> validation_fn(
    const SampleSet* validation, const std::function<double(std::span<const double>)>& f) {
  if (!validation || validation->size() == 0) return {};
  return f;
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

json train_json(const nn::TrainTrace& t) {
  return {{"train_loss", t.train_loss}, {"validation_loss", t.validation_loss}, {"best_epoch", t.best_epoch}};
}

// --- CNN

class CnnPredictor : public Predictor {
 public:
  explicit CnnPredictor(const PredictorConfig& c) : config_(c) {}
  PredictorKind kind() const override { return PredictorKind::Cnn; }

  void fit(const SampleSet& train, const SampleSet* validation) override {
    if (train.size() == 0) throw Error(ErrorKind::InvalidInput, "cnn: empty training set");
    spec_ = config_.cnn;
    spec_.input_height = train.image_height;
    spec_.input_width = train.image_width;
    spec_.outputs = kOut;
    spec_.validate();
    if (train.X.cols() != static_cast<Eigen::Index>(train.image_height) * train.image_width) {
      throw Error(ErrorKind::InvalidInput, "cnn: features must be one channel of the canvas");
    }
    scaler_ = Scaler::fit(train.Y);
    mean_ = train.X.colwise().mean().transpose();
    const auto imgs = images(train);
    const Matrix Y = scaler_.forward(train.Y).transpose();
    Rng rng = derive_rng(config_.seed, 0xC);
    nn::Cnn net(spec_, rng);
    std::vector<nn::Matrix> vimgs;
    Matrix vY;
    if (validation && validation->size() > 0) {
      vimgs = images(*validation);
      vY = scaler_.forward(validation->Y).transpose();
    }
    const auto vrows = all_rows(vimgs.size());
    auto loss = [&](std::span<const double> p, std::span<const std::size_t> idx, std::vector<double>* g) {
      return nn::Cnn(spec_, std::vector<double>(p.begin(), p.end())).loss(imgs, Y, idx, g);
    };
    auto vloss = [&](std::span<const double> p) {
      return nn::Cnn(spec_, std::vector<double>(p.begin(), p.end())).loss(vimgs, vY, vrows, nullptr);
    };
    nn::TrainConfig tc = config_.train;
    tc.seed = config_.seed;
    params_ = net.params();
    trace_ = nn::train_sgd(params_, imgs.size(), loss, validation_fn(validation, vloss), tc);
  }

  ModelOutput predict(const SampleSet& s) const override {
    require_fitted(!params_.empty());
    require_dim(s, mean_.size());
    const nn::Cnn net(spec_, params_);
    ModelOutput out{Matrix(s.X.rows(), kOut), Matrix::Zero(s.X.rows(), kOut)};
    const auto imgs = images(s);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      const nn::Vector y = net.forward(imgs[i]);
      for (int k = 0; k < kOut; ++k) {
        out.mean(static_cast<Eigen::Index>(i), k) = y(k) * scaler_.scale[k] + scaler_.mean[k];
      }
    }
    return out;
  }

  std::string header_json() const override {
    json j;
    j["kind"] = "cnn";
    j["spec"] = {spec_.input_height, spec_.input_width, spec_.conv1_kernels, spec_.conv2_kernels,
                 spec_.kernel_size, spec_.pool, spec_.hidden, spec_.outputs,
                 spec_.loss == nn::LossKind::Norm ? 0 : 1};
    j["scaler"] = scaler_.to_json();
    j["trace"] = train_json(trace_);
    return j.dump();
  }
  std::vector<double> payload() const override {
    std::vector<double> out(mean_.data(), mean_.data() + mean_.size());
    out.insert(out.end(), params_.begin(), params_.end());
    return out;
  }
  static std::unique_ptr<Predictor> restore(const json& h, std::span<const double> payload) {
    auto p = std::make_unique<CnnPredictor>(PredictorConfig{});
    const auto s = h.at("spec").get<std::vector<int>>();
    if (s.size() != 9) throw Error(ErrorKind::Io, "cnn model: bad spec");
    p->spec_ = {s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7], s[8] == 0 ? nn::LossKind::Norm : nn::LossKind::Squared};
    p->spec_.validate();
    p->scaler_ = Scaler::from_json(h.at("scaler"));
    Cursor cur{payload};
    const auto d = static_cast<Eigen::Index>(s[0]) * s[1];
    p->mean_ = cur.matrix(d, 1);
    const auto rest = cur.take(p->spec_.parameter_count());
    p->params_.assign(rest.begin(), rest.end());
    return p;
  }

 private:
  std::vector<nn::Matrix> images(const SampleSet& s) const {
    std::vector<nn::Matrix> out;
    out.reserve(s.size());
    for (Eigen::Index i = 0; i < s.X.rows(); ++i) {
      const Eigen::VectorXd v = s.X.row(i).transpose() - mean_;
      // features are row-major; Eigen maps column-major, so map the transpose
      out.push_back(Eigen::Map<const Matrix>(v.data(), spec_.input_width, spec_.input_height).transpose());
    }
    return out;
  }

  PredictorConfig config_;
  nn::CnnSpec spec_;
  Scaler scaler_;
  Eigen::VectorXd mean_;
  std::vector<double> params_;
  nn::TrainTrace trace_;
};

// --- NN-FD

class NnFdPredictor : public Predictor {
 public:
  explicit NnFdPredictor(const PredictorConfig& c) : config_(c) {}
  PredictorKind kind() const override { return PredictorKind::NnFd; }

  void fit(const SampleSet& train, const SampleSet* validation) override {
    if (train.size() == 0) throw Error(ErrorKind::InvalidInput, "nnfd: empty training set");
    spec_ = nn::FdNetSpec::nn_default(static_cast<int>(train.X.cols()), kOut);
    for (auto& l : spec_.layers) l.drop_prob = config_.nn_drop;
    scaler_ = Scaler::fit(train.Y);
    mean_ = train.X.colwise().mean().transpose();
    const Matrix X = centered_columns(train.X, mean_);
    const Matrix Y = scaler_.forward(train.Y).transpose();
    Matrix vX, vY;
    if (validation && validation->size() > 0) {
      vX = centered_columns(validation->X, mean_);
      vY = scaler_.forward(validation->Y).transpose();
    }
    const auto vrows = all_rows(static_cast<std::size_t>(vX.cols()));
    Rng rng = derive_rng(config_.seed, 0xF0);
    params_ = nn::init_params(spec_, rng);
    auto loss = [&](std::span<const double> p, std::span<const std::size_t> idx, std::vector<double>* g) {
      return nn::fd_loss(spec_, p, X, Y, idx, g);
    };
    auto vloss = [&](std::span<const double> p) { return nn::fd_loss(spec_, p, vX, vY, vrows, nullptr); };
    nn::TrainConfig tc = config_.train;
    tc.seed = config_.seed;
    trace_ = nn::train_sgd(params_, static_cast<std::size_t>(X.cols()), loss, validation_fn(validation, vloss), tc);
  }

  ModelOutput predict(const SampleSet& s) const override {
    require_fitted(!params_.empty());
    require_dim(s, mean_.size());
    const nn::FdOutput o = nn::fd_forward(spec_, params_, centered_columns(s.X, mean_));
    ModelOutput out{Matrix(s.X.rows(), kOut), Matrix(s.X.rows(), kOut)};
    for (Eigen::Index i = 0; i < s.X.rows(); ++i) {
      for (int k = 0; k < kOut; ++k) {
        out.mean(i, k) = o.mean(k, i) * scaler_.scale[k] + scaler_.mean[k];
        out.std(i, k) = std::sqrt(std::max(o.var(k, i), 0.0)) * scaler_.scale[k];
      }
    }
    return out;
  }

  std::string header_json() const override {
    json j;
    j["kind"] = "nnfd";
    j["inputs"] = spec_.inputs;
    json layers = json::array();
    for (const auto& l : spec_.layers) layers.push_back({l.units, static_cast<int>(l.activation), l.drop_prob});
    j["layers"] = layers;
    j["loss"] = spec_.loss == nn::LossKind::Norm ? 0 : 1;
    j["scaler"] = scaler_.to_json();
    j["trace"] = train_json(trace_);
    return j.dump();
  }
  std::vector<double> payload() const override {
    std::vector<double> out(mean_.data(), mean_.data() + mean_.size());
    out.insert(out.end(), params_.begin(), params_.end());
    return out;
  }
  static std::unique_ptr<Predictor> restore(const json& h, std::span<const double> payload) {
    auto p = std::make_unique<NnFdPredictor>(PredictorConfig{});
    p->spec_.inputs = h.at("inputs").get<int>();
    for (const auto& l : h.at("layers")) {
      p->spec_.layers.push_back({l[0].get<int>(), static_cast<nn::Activation>(l[1].get<int>()), l[2].get<double>()});
    }
    p->spec_.loss = h.at("loss").get<int>() == 0 ? nn::LossKind::Norm : nn::LossKind::Squared;
    p->spec_.validate();
    p->scaler_ = Scaler::from_json(h.at("scaler"));
    Cursor cur{payload};
    p->mean_ = cur.matrix(p->spec_.inputs, 1);
    const auto rest = cur.take(p->spec_.parameter_count());
    p->params_.assign(rest.begin(), rest.end());
    return p;
  }

 private:
  PredictorConfig config_;
  nn::FdNetSpec spec_;
  Scaler scaler_;
  Eigen::VectorXd mean_;
  std::vector<double> params_;
  nn::TrainTrace trace_;
};

// --- RNN-FD

// Consecutive row ranges of each sequence.
std::vector<std::pair<std::size_t, std::size_t>> sequence_ranges(const SampleSet& s) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t start = 0;
  for (std::size_t i = 1; i <= s.size(); ++i) {
    if (i == s.size() || s.sequence[i] != s.sequence[start]) {
      out.emplace_back(start, i);
      start = i;
    }
  }
  return out;
}

class RnnFdPredictor : public Predictor {
 public:
  explicit RnnFdPredictor(const PredictorConfig& c) : config_(c) {}
  PredictorKind kind() const override { return PredictorKind::RnnFd; }

  void fit(const SampleSet& train, const SampleSet* validation) override {
    if (train.size() == 0) throw Error(ErrorKind::InvalidInput, "rnnfd: empty training set");
    spec_.inputs = static_cast<int>(train.X.cols());
    spec_.hidden = config_.rnn_hidden;
    spec_.outputs = kOut;
    spec_.window = config_.rnn_window;
    spec_.validate();
    scaler_ = Scaler::fit(train.Y);
    mean_ = train.X.colwise().mean().transpose();
    std::vector<nn::Matrix> X, Y, vX, vY;
    windows(train, X, Y);
    if (validation && validation->size() > 0) windows(*validation, vX, vY);
    const auto vrows = all_rows(vX.size());
    Rng rng = derive_rng(config_.seed, 0x8E);
    params_ = nn::init_params(spec_, rng);
    auto loss = [&](std::span<const double> p, std::span<const std::size_t> idx, std::vector<double>* g) {
      return nn::rnn_loss(spec_, p, X, Y, idx, g);
    };
    auto vloss = [&](std::span<const double> p) { return nn::rnn_loss(spec_, p, vX, vY, vrows, nullptr); };
    nn::TrainConfig tc = config_.train;
    tc.seed = config_.seed;
    trace_ = nn::train_sgd(params_, X.size(), loss, validation_fn(validation, vloss), tc);
  }

  ModelOutput predict(const SampleSet& s) const override {
    require_fitted(!params_.empty());
    require_dim(s, mean_.size());
    ModelOutput out{Matrix(s.X.rows(), kOut), Matrix(s.X.rows(), kOut)};
    for (const auto& [a, b] : sequence_ranges(s)) {
      const Matrix Xs = centered_columns(s.X.middleRows(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b - a)), mean_);
      const nn::FdOutput o = nn::rnn_forward(spec_, params_, Xs);
      for (std::size_t t = 0; t < b - a; ++t) {
        const auto i = static_cast<Eigen::Index>(a + t);
        for (int k = 0; k < kOut; ++k) {
          out.mean(i, k) = o.mean(k, static_cast<Eigen::Index>(t)) * scaler_.scale[k] + scaler_.mean[k];
          out.std(i, k) = std::sqrt(std::max(o.var(k, static_cast<Eigen::Index>(t)), 0.0)) * scaler_.scale[k];
        }
      }
    }
    return out;
  }

  std::string header_json() const override {
    json j;
    j["kind"] = "rnnfd";
    j["spec"] = {spec_.inputs, spec_.hidden, spec_.outputs, spec_.window};
    j["drops"] = {spec_.input_drop, spec_.hidden_drop};
    j["scaler"] = scaler_.to_json();
    j["trace"] = train_json(trace_);
    return j.dump();
  }
  std::vector<double> payload() const override {
    std::vector<double> out(mean_.data(), mean_.data() + mean_.size());
    out.insert(out.end(), params_.begin(), params_.end());
    return out;
  }
  static std::unique_ptr<Predictor> restore(const json& h, std::span<const double> payload) {
    auto p = std::make_unique<RnnFdPredictor>(PredictorConfig{});
    const auto s = h.at("spec").get<std::vector<int>>();
    const auto d = h.at("drops").get<std::vector<double>>();
    if (s.size() != 4 || d.size() != 2) throw Error(ErrorKind::Io, "rnnfd model: bad spec");
    p->spec_.inputs = s[0];
    p->spec_.hidden = s[1];
    p->spec_.outputs = s[2];
    p->spec_.window = s[3];
    p->spec_.input_drop = d[0];
    p->spec_.hidden_drop = d[1];
    p->spec_.validate();
    p->scaler_ = Scaler::from_json(h.at("scaler"));
    Cursor cur{payload};
    p->mean_ = cur.matrix(s[0], 1);
    const auto rest = cur.take(p->spec_.parameter_count());
    p->params_.assign(rest.begin(), rest.end());
    return p;
  }

 private:
  void windows(const SampleSet& s, std::vector<nn::Matrix>& X, std::vector<nn::Matrix>& Y) const {
    const Matrix Z = scaler_.forward(s.Y);
    const auto w = static_cast<std::size_t>(spec_.window);
    for (const auto& [a, b] : sequence_ranges(s)) {
      for (std::size_t start = a; start < b; start += w) {
        const std::size_t end = std::min(b, start + w);
        const auto r0 = static_cast<Eigen::Index>(start), len = static_cast<Eigen::Index>(end - start);
        X.push_back(centered_columns(s.X.middleRows(r0, len), mean_));
        Y.push_back(Z.middleRows(r0, len).transpose());
      }
    }
  }

  PredictorConfig config_;
  nn::RnnSpec spec_;
  Scaler scaler_;
  Eigen::VectorXd mean_;
  std::vector<double> params_;
  nn::TrainTrace trace_;
};

constexpr char kMagic[8] = {'N', 'F', 'M', 'O', 'D', 'E', 'L', '1'};

}  // namespace

std::unique_ptr<Predictor> make_predictor(const PredictorConfig& config) {
  switch (config.kind) {
    case PredictorKind::GpExact:
    case PredictorKind::GpFitc: return std::make_unique<GpPredictor>(config);
    case PredictorKind::Cnn: return std::make_unique<CnnPredictor>(config);
    case PredictorKind::NnFd: return std::make_unique<NnFdPredictor>(config);
    case PredictorKind::RnnFd: return std::make_unique<RnnFdPredictor>(config);
  }
  throw Error(ErrorKind::Config, "unknown predictor kind");
}

void save_model(const std::string& path, const Predictor& model) {
  static_assert(std::endian::native == std::endian::little, "model container assumes little-endian");
  const std::string header = model.header_json();
  const std::vector<double> payload = model.payload();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write model " + path);
  const std::uint64_t hl = header.size(), pl = payload.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&hl), sizeof hl);
  out.write(header.data(), static_cast<std::streamsize>(hl));
  out.write(reinterpret_cast<const char*>(&pl), sizeof pl);
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(pl * sizeof(double)));
  if (!out) throw Error(ErrorKind::Io, "short write on model " + path);
}

std::unique_ptr<Predictor> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open model " + path);
  char magic[8];
  std::uint64_t hl = 0, pl = 0;
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw Error(ErrorKind::Io, path + " is not a model container");
  }
  in.read(reinterpret_cast<char*>(&hl), sizeof hl);
  if (!in || hl > (1ULL << 32)) throw Error(ErrorKind::Io, "model header length invalid");
  std::string header(hl, '\0');
  in.read(header.data(), static_cast<std::streamsize>(hl));
  in.read(reinterpret_cast<char*>(&pl), sizeof pl);
  if (!in || pl > (1ULL << 34)) throw Error(ErrorKind::Io, "model payload length invalid");
  std::vector<double> payload(pl);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(pl * sizeof(double)));
  if (!in) throw Error(ErrorKind::Io, "model payload truncated");
  try {
    const json h = json::parse(header);
    const PredictorKind k = predictor_from_string(h.at("kind").get<std::string>());
    switch (k) {
      case PredictorKind::GpExact:
      case PredictorKind::GpFitc: return GpPredictor::restore(h, payload);
      case PredictorKind::Cnn: return CnnPredictor::restore(h, payload);
      case PredictorKind::NnFd: return NnFdPredictor::restore(h, payload);
      case PredictorKind::RnnFd: return RnnFdPredictor::restore(h, payload);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Io, std::string("model header: ") + e.what());
  }
  throw Error(ErrorKind::Io, "unknown model kind");
}

// --------------------------------------------------------------- pipeline

PipelineConfig PipelineConfig::from(const KeyValueConfig& kv) {
  PipelineConfig c;
  c.dataset_dir = kv.get("dataset_dir", c.dataset_dir);
  c.work_dir = kv.get("work_dir", c.work_dir);
  c.generator = synth::GeneratorConfig::from(kv);
  c.seed = static_cast<std::uint64_t>(kv.get("seed", static_cast<double>(c.seed)));
  c.jobs = kv.get("jobs", c.jobs);

  c.scheme.kind = scheme_from_string(kv.get("scheme", std::string(to_string(c.scheme.kind))));
  c.scheme.held_out_surface = kv.get("held_out_surface", c.scheme.held_out_surface);
  c.scheme.held_out_session = kv.get("held_out_session", c.scheme.held_out_session);
  c.scheme.held_out_participant = kv.get("held_out_participant", c.scheme.held_out_participant);
  c.scheme.data_fraction = kv.get("data_fraction", c.scheme.data_fraction);
  c.scheme.inducing_fraction = kv.get("inducing_fraction", c.scheme.inducing_fraction);

  c.predictor.kind = predictor_from_string(kv.get("predictor", std::string(to_string(c.predictor.kind))));
  c.predictor.inducing_fraction = c.scheme.inducing_fraction;
  c.predictor.gp.max_iterations = kv.get("gp_iterations", c.predictor.gp.max_iterations);
  c.predictor.gp.restarts = kv.get("gp_restarts", c.predictor.gp.restarts);
  const std::string kernel = kv.get("gp_kernel", std::string("printed"));
  if (kernel != "printed" && kernel != "squared") throw Error(ErrorKind::Config, "gp_kernel must be printed or squared");
  c.predictor.gp.distance = kernel == "squared" ? gp::KernelDistance::Squared : gp::KernelDistance::AsPrinted;
  c.predictor.train.epochs = kv.get("epochs", c.predictor.train.epochs);
  c.predictor.train.batch_size = kv.get("batch_size", c.predictor.train.batch_size);
  c.predictor.train.learning_rate = kv.get("learning_rate", c.predictor.train.learning_rate);
  c.predictor.train.momentum = kv.get("momentum", c.predictor.train.momentum);
  c.predictor.train.patience = kv.get("patience", c.predictor.train.patience);
  c.predictor.nn_drop = kv.get("nn_drop", c.predictor.nn_drop);
  c.predictor.rnn_hidden = kv.get("rnn_hidden", c.predictor.rnn_hidden);
  c.predictor.rnn_window = kv.get("rnn_window", c.predictor.rnn_window);
  const double default_val = is_neural(c.predictor.kind) ? 0.25 : 0.0;
  c.scheme.validation_fraction = kv.get("validation_fraction", default_val);
  const bool pooled = c.scheme.kind == SchemeKind::ParticipantCross || c.scheme.kind == SchemeKind::SingleModelAll;
  c.per_participant = kv.get("per_participant", pooled ? 0 : 1) != 0;

  c.frame_stride = kv.get("frame_stride", c.frame_stride);
  c.frame_phase = kv.get("frame_phase", c.frame_phase);
  c.test_frame_stride = kv.get("test_frame_stride", c.test_frame_stride);
  c.canvas_height = kv.get("canvas_height", c.canvas_height);
  c.canvas_width = kv.get("canvas_width", c.canvas_width);
  const int it = kv.get("align_iterations", c.alignment.max_iterations[0]);
  c.alignment.max_iterations = {it, it, it};
  c.alignment.cg_iterations = kv.get("align_cg_iterations", c.alignment.cg_iterations);
  c.alignment.tolerance = kv.get("align_tolerance", c.alignment.tolerance);
  c.alignment.w = kv.get("align_w", c.alignment.w);
  const double sp = kv.get("align_spacing", c.alignment.spacings[0]);
  c.alignment.spacings = {sp, sp / 2.0, sp / 4.0};
  c.reference_max_fz = kv.get("reference_max_fz", c.reference_max_fz);
  c.smooth_span = kv.get("smooth_span", c.smooth_span);
  c.feature_blur = kv.get("feature_blur", c.feature_blur);
  c.validate();
  return c;
}

void PipelineConfig::validate() const {
  if (frame_stride < 1 || test_frame_stride < 1 || frame_phase < 0) {
    throw Error(ErrorKind::Config, "frame strides must be >= 1 and frame_phase >= 0");
  }
  if (!(feature_blur >= 0.0)) throw Error(ErrorKind::Config, "feature_blur must be >= 0");
  if (smooth_span > 1 && smooth_span % 2 == 0) throw Error(ErrorKind::Config, "smooth_span must be odd");
  if (smooth_span > 1 && smooth_span < 4) throw Error(ErrorKind::Config, "smooth_span must be >= 5 or <= 1");
  if (scheme.data_fraction <= 0.0 || scheme.data_fraction > 1.0) {
    throw Error(ErrorKind::Config, "data_fraction must be in (0,1]");
  }
  if (predictor.inducing_fraction <= 0.0 || predictor.inducing_fraction > 1.0) {
    throw Error(ErrorKind::Config, "inducing_fraction must be in (0,1]");
  }
  if (canvas_height < 0 || canvas_width < 0) throw Error(ErrorKind::Config, "canvas size must be >= 0");
  alignment.validate();
}

ImageFrame canonical_frame(const ImageFrame& frame, const PipelineConfig& config) {
  const int H = config.canvas_height > 0 ? config.canvas_height : frame.height();
  const int W = config.canvas_width > 0 ? config.canvas_width : frame.width();
  const imaging::Mask mask = imaging::segment_nail(frame, config.segmentation);
  if (mask.empty()) throw Error(ErrorKind::CannotCenter, "nail not found");
  return imaging::center_nail(imaging::apply_mask(frame, mask), mask, H, W).frame;
}

namespace {

template <class F>
auto staged(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e);
  }
}

struct Labeled {
  sync::SyncResult sync;
  calib::TorqueCalibration cal;
  Trial trial;  // timestamps shifted
};

Labeled label_trial(const Trial& trial) {
  Labeled l;
  l.trial = trial;
  l.sync = staged("sync", [&] { return sync::synchronize_trial(l.trial); });
  l.cal = staged("calibrate", [&] {
    return calib::calibrate_trial_torques(trial.wrenches, trial.force_rate(), trial.surface);
  });
  return l;
}

TargetVector frame_target(const Labeled& l, std::size_t i) {
  const Trial& t = l.trial;
  Wrench w = sync::interpolate_wrench(l.cal.wrenches, t.frames[i].timestamp());
  if (i < t.marker_angle_deg.size()) {
    w.f = calib::rotate_forces(w.f, t.marker_angle_deg[i], t.reference_marker_angle_deg);
  }
  return TargetVector::from(w, t.surface.c1, t.surface.c2);
}

bool in_force_window(const Labeled& l, std::size_t i) {
  const double ts = l.trial.frames[i].timestamp();
  return ts >= l.trial.wrenches.front().timestamp && ts <= l.trial.wrenches.back().timestamp;
}

}  // namespace

ImageFrame reference_frame(const Trial& trial, const PipelineConfig& config) {
  const Labeled l = label_trial(trial);
  for (std::size_t i = 0; i < l.trial.frames.size(); ++i) {
    if (!in_force_window(l, i)) continue;
    if (std::abs(frame_target(l, i)[Component::Fz]) <= config.reference_max_fz) {
      return staged("track", [&] { return canonical_frame(l.trial.frames[i], config); });
    }
  }
  throw StageError("align", Error(ErrorKind::AlignmentFailed,
                                  "no low-force reference frame in trial " + trial.name));
}

ProcessedTrial process_trial(const Trial& trial, const ImageFrame& reference,
                             const PipelineConfig& config, int stride) {
  const Labeled l = label_trial(trial);
  ProcessedTrial p;
  p.key = {trial.participant, trial.session, trial.weight_g, trial.surface.id, trial.repetition};
  p.name = trial.name;
  p.finger = trial.finger;
  p.sync_offset_s = l.sync.offset_s;
  p.contact = l.cal.contact;
  for (std::size_t i = static_cast<std::size_t>(config.frame_phase); i < l.trial.frames.size();
       i += static_cast<std::size_t>(stride)) {
    if (!in_force_window(l, i)) continue;
    const ImageFrame canon = staged("track", [&] { return canonical_frame(l.trial.frames[i], config); });
    const align::AlignmentResult a = staged("align", [&] { return align::align(reference, canon, config.alignment); });
    p.time.push_back(l.trial.frames[i].timestamp());
    p.frame_index.push_back(static_cast<int>(i));
    p.labels.push_back(frame_target(l, i));
    p.features.push_back(flatten_image(imaging::gaussian_blur(a.aligned, config.feature_blur), ChannelPolicy::Green));
  }
  return p;
}

namespace {

// A trial source: an on-disk directory or a generator id.
struct Source {
  TrialKey key;
  Finger finger = Finger::Index;
  std::string dir;
  std::optional<synth::TrialId> id;
  std::string name;
};

std::vector<Source> collect_sources(const PipelineConfig& c) {
  std::vector<Source> out;
  if (!c.dataset_dir.empty()) {
    for (const auto& dir : io::list_trials(c.dataset_dir)) {
      const KeyValueConfig meta = KeyValueConfig::load((fs::path(dir) / "meta").string());
      Source s;
      s.dir = dir;
      s.name = meta.get("name", fs::path(dir).filename().string());
      s.finger = finger_from_string(meta.get("finger", std::string("index")));
      s.key = {meta.get("participant", 1), meta.get("session", 0), meta.get("weight_g", 165),
               meta.get("surface_id", 1), meta.get("repetition", 0)};
      if (s.finger == Finger::Thumb) {
        // thumbs share the grasp's surface id in the key
        s.key.surface_id = meta.get("grasp_surface_id", s.key.surface_id);
      }
      out.push_back(std::move(s));
    }
    if (out.empty()) throw Error(ErrorKind::Io, "no trials under " + c.dataset_dir);
  } else {
    for (const auto& id : synth::enumerate_trials(c.generator)) {
      Source s;
      s.id = id;
      s.name = synth::trial_name(id);
      s.finger = id.finger;
      s.key = {id.participant, id.session, id.weight_g, id.surface_id, id.repetition};
      out.push_back(std::move(s));
    }
  }
  return out;
}

struct Loaded {
  Trial trial;
  std::optional<std::array<double, 2>> static_window;
};

std::optional<std::array<double, 2>> read_static_window(const std::string& dir) {
  const fs::path p = fs::path(dir) / "truth_meta";
  if (!fs::exists(p)) return std::nullopt;
  const KeyValueConfig kv = KeyValueConfig::load(p.string());
  const std::string b = kv.get("phase_boundaries", std::string());
  std::vector<double> v;
  std::stringstream ss(b);
  for (std::string tok; std::getline(ss, tok, ',');) v.push_back(std::stod(tok));
  if (v.size() != synth::kPhaseCount + 1) return std::nullopt;
  const int s = static_cast<int>(synth::Phase::Static);
  return std::array<double, 2>{v[s], v[s + 1]};
}

Loaded load_source(const Source& s, const PipelineConfig& c) {
  return staged("load", [&] {
    Loaded l;
    if (s.id) {
      synth::GeneratedTrial g = synth::generate_trial(c.generator, *s.id);
      l.static_window = std::array<double, 2>{g.truth.profile.static_begin(), g.truth.profile.static_end()};
      l.trial = std::move(g.trial);
    } else {
      l.trial = io::read_trial(s.dir);
      l.static_window = read_static_window(s.dir);
    }
    return l;
  });
}

void write_labels(const std::string& dir, const ProcessedTrial& p) {
  fs::create_directories(dir);
  io::Table t;
  t.header = {"frame", "time"};
  for (auto n : kComponentNames) t.header.emplace_back(n);
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    std::vector<double> row{static_cast<double>(p.frame_index[i]), p.time[i]};
    for (std::size_t k = 0; k < kTargetDim; ++k) row.push_back(p.labels[i][k]);
    t.rows.push_back(std::move(row));
  }
  io::write_csv((fs::path(dir) / "labels.csv").string(), t);
  std::ofstream o(fs::path(dir) / "stage_summary");
  o << std::setprecision(17) << "sync_offset_s = " << p.sync_offset_s << "\ncontact_x = " << p.contact.x
    << "\ncontact_y = " << p.contact.y << "\ncontact_z = " << p.contact.z << "\n";
}

}  // namespace

SampleSet make_samples(std::span<const ProcessedTrial* const> trials, int h, int w) {
  std::size_t n = 0, d = 0;
  for (const auto* t : trials) {
    n += t->features.size();
    if (!t->features.empty()) d = t->features[0].size();
  }
  SampleSet s;
  s.image_height = h;
  s.image_width = w;
  s.X.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  s.Y.resize(static_cast<Eigen::Index>(n), kOut);
  Eigen::Index r = 0;
  for (std::size_t ti = 0; ti < trials.size(); ++ti) {
    const auto* t = trials[ti];
    for (std::size_t i = 0; i < t->features.size(); ++i, ++r) {
      s.X.row(r) = Eigen::Map<const Eigen::RowVectorXd>(t->features[i].data(), static_cast<Eigen::Index>(d));
      for (int k = 0; k < kOut; ++k) s.Y(r, k) = t->labels[i][k];
      s.sequence.push_back(static_cast<int>(ti));
      s.time.push_back(t->time[i]);
    }
  }
  return s;
}

PipelineResult run_pipeline(const PipelineConfig& config) {
  config.validate();
  const std::vector<Source> sources = staged("load", [&] { return collect_sources(config); });

  std::vector<TrialKey> keys;
  for (const auto& s : sources) keys.push_back(s.key);
  Rng split_rng = derive_rng(config.seed, 0x5B11);
  const std::vector<SplitTag> tags = staged("split", [&] { return make_splits(keys, config.scheme, split_rng); });

  // references: first trial of every (participant, finger)
  std::map<std::pair<int, Finger>, std::size_t> ref_source;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    ref_source.try_emplace({sources[i].key.participant, sources[i].finger}, i);
  }
  std::vector<std::pair<std::pair<int, Finger>, std::size_t>> ref_list(ref_source.begin(), ref_source.end());
  std::vector<ImageFrame> ref_frames(ref_list.size());
  parallel_for(ref_list.size(), config.jobs, [&](std::size_t i) {
    const Loaded l = load_source(sources[ref_list[i].second], config);
    ref_frames[i] = reference_frame(l.trial, config);
  });
  std::map<std::pair<int, Finger>, const ImageFrame*> reference;
  for (std::size_t i = 0; i < ref_list.size(); ++i) reference[ref_list[i].first] = &ref_frames[i];

  std::vector<ProcessedTrial> processed(sources.size());
  parallel_for(sources.size(), config.jobs, [&](std::size_t i) {
    const Loaded l = load_source(sources[i], config);
    const int stride = tags[i] == SplitTag::Test ? config.test_frame_stride : config.frame_stride;
    processed[i] = process_trial(l.trial, *reference.at({sources[i].key.participant, sources[i].finger}),
                                 config, stride);
    processed[i].key = sources[i].key;
    processed[i].static_window = l.static_window;
    if (!config.work_dir.empty()) {
      write_labels((fs::path(config.work_dir) / "trials" / processed[i].name).string(), processed[i]);
    }
  });

  const int H = ref_frames.front().height(), W = ref_frames.front().width();
  // model groups
  std::map<std::pair<int, Finger>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    groups[{config.per_participant ? sources[i].key.participant : 0, sources[i].finger}].push_back(i);
  }

  PipelineResult result;
  std::size_t n_train = 0;
  std::vector<std::vector<TargetVector>> test_pred(sources.size()), test_std(sources.size());
  int group_index = 0;
  for (const auto& [gkey, members] : groups) {
    std::vector<const ProcessedTrial*> tr, va, te;
    std::vector<std::size_t> te_idx;
    for (std::size_t i : members) {
      if (tags[i] == SplitTag::Train) tr.push_back(&processed[i]);
      if (tags[i] == SplitTag::Validation) va.push_back(&processed[i]);
      if (tags[i] == SplitTag::Test) {
        te.push_back(&processed[i]);
        te_idx.push_back(i);
      }
    }
    if (te.empty()) continue;
    if (tr.empty()) {
      throw StageError("train", Error(ErrorKind::SchemeInfeasible, "model group without training trials"));
    }
    SampleSet train = make_samples(tr, H, W);
    if (config.scheme.data_fraction < 1.0) {
      Rng rng = derive_rng(config.seed, 0xDA7A + static_cast<std::uint64_t>(group_index));
      const auto n = train.size();
      const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(config.scheme.data_fraction * static_cast<double>(n))));
      std::vector<std::size_t> rows(n);
      std::iota(rows.begin(), rows.end(), 0);
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(keep);
      std::sort(rows.begin(), rows.end());
      train = train.subset(rows);
    }
    const SampleSet val = make_samples(va, H, W);
    const SampleSet test = make_samples(te, H, W);
    PredictorConfig pc = config.predictor;
    pc.seed = config.seed * 7919 + static_cast<std::uint64_t>(group_index);
    pc.jobs = config.jobs;
    auto model = make_predictor(pc);
    staged("train", [&] { model->fit(train, val.size() ? &val : nullptr); return 0; });
    n_train += train.size();
    if (!config.work_dir.empty()) {
      fs::create_directories(fs::path(config.work_dir) / "models");
      std::ostringstream name;
      name << "p" << gkey.first << "_" << to_string(gkey.second) << ".nfm";
      staged("train", [&] { save_model((fs::path(config.work_dir) / "models" / name.str()).string(), *model); return 0; });
    }
    const ModelOutput out = staged("predict", [&] { return model->predict(test); });
    // smoothing per trial sequence and component
    Eigen::Index row = 0;
    for (std::size_t t = 0; t < te.size(); ++t) {
      const auto len = static_cast<Eigen::Index>(te[t]->features.size());
      std::vector<TargetVector> pred(static_cast<std::size_t>(len)), sd(static_cast<std::size_t>(len));
      for (int k = 0; k < kOut; ++k) {
        std::vector<double> series(static_cast<std::size_t>(len));
        for (Eigen::Index i = 0; i < len; ++i) series[static_cast<std::size_t>(i)] = out.mean(row + i, k);
        if (config.smooth_span > 1 && len >= 4) {
          post::SmootherConfig sc;
          sc.span = config.smooth_span;
          series = staged("smooth", [&] { return post::smooth(series, sc); });
        }
        for (Eigen::Index i = 0; i < len; ++i) {
          pred[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = series[static_cast<std::size_t>(i)];
          sd[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] = out.std(row + i, k);
        }
      }
      test_pred[te_idx[t]] = std::move(pred);
      test_std[te_idx[t]] = std::move(sd);
      row += len;
    }
    ++group_index;
  }

  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (tags[i] != SplitTag::Test) continue;
    result.test_trials.push_back(processed[i].name);
    result.test_frames.push_back(processed[i].frame_index);
    for (std::size_t f = 0; f < test_pred[i].size(); ++f) {
      result.predictions.truth.push_back(processed[i].labels[f]);
      result.predictions.pred.push_back(test_pred[i][f]);
      result.predictions.std.push_back(test_std[i][f]);
    }
  }
  result.report = staged("eval", [&] {
    return evaluate(result.predictions, std::string(to_string(config.predictor.kind)),
                    std::string(to_string(config.scheme.kind)));
  });
  result.report.n_train = n_train;

  // static-phase consistency between the two fingers of a test grasp
  std::map<std::tuple<int, int, int, int, int>, std::array<std::size_t, 2>> grasps;
  const std::size_t none = sources.size();
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (tags[i] != SplitTag::Test) continue;
    const auto& k = sources[i].key;
    auto [it, fresh] = grasps.try_emplace({k.participant, k.session, k.weight_g, k.surface_id, k.repetition},
                                          std::array<std::size_t, 2>{none, none});
    it->second[sources[i].finger == Finger::Thumb ? 1 : 0] = i;
  }
  StaticDiagnostics diag;
  double gravity = config.generator.gravity;
  for (const auto& [k, pair] : grasps) {
    if (pair[0] == none || pair[1] == none) continue;
    const auto& a = processed[pair[0]];
    const auto& b = processed[pair[1]];
    if (!a.static_window) continue;
    const double weight = std::get<2>(k) / 1000.0 * gravity;
    for (std::size_t fa = 0; fa < a.frame_index.size(); ++fa) {
      const auto it = std::find(b.frame_index.begin(), b.frame_index.end(), a.frame_index[fa]);
      if (it == b.frame_index.end()) continue;
      const std::size_t fb = static_cast<std::size_t>(it - b.frame_index.begin());
      const double t = a.time[fa];
      if (t < (*a.static_window)[0] || t > (*a.static_window)[1]) continue;
      const auto& pa = test_pred[pair[0]][fa];
      const auto& pb = test_pred[pair[1]][fb];
      diag.mean_abs_fz_difference += std::abs(pb[Component::Fz] - pa[Component::Fz]);
      diag.mean_abs_balance_error += std::abs(pb[Component::Fx] + pa[Component::Fx] - weight);
      ++diag.samples;
    }
  }
  if (diag.samples) {
    diag.mean_abs_fz_difference /= static_cast<double>(diag.samples);
    diag.mean_abs_balance_error /= static_cast<double>(diag.samples);
    result.report.static_diagnostics = diag;
  }

  if (!config.work_dir.empty()) {
    staged("eval", [&] {
      const fs::path w(config.work_dir);
      fs::create_directories(w);
      std::ofstream(w / "report.json") << result.report.to_json() << "\n";
      std::ofstream(w / "report.csv") << result.report.to_csv();
      std::ofstream(w / "summary.txt") << result.report.summary();
      io::Table t;
      t.header = {"sample"};
      for (auto n : kComponentNames) t.header.push_back("true_" + std::string(n));
      for (auto n : kComponentNames) t.header.push_back("pred_" + std::string(n));
      for (auto n : kComponentNames) t.header.push_back("std_" + std::string(n));
      for (std::size_t i = 0; i < result.predictions.truth.size(); ++i) {
        std::vector<double> row{static_cast<double>(i)};
        for (std::size_t k = 0; k < kTargetDim; ++k) row.push_back(result.predictions.truth[i][k]);
        for (std::size_t k = 0; k < kTargetDim; ++k) row.push_back(result.predictions.pred[i][k]);
        for (std::size_t k = 0; k < kTargetDim; ++k) row.push_back(result.predictions.std[i][k]);
        t.rows.push_back(std::move(row));
      }
      io::write_csv((w / "predictions.csv").string(), t);
      return 0;
    });
  }
  return result;
}

}  // namespace nailforce::harness
