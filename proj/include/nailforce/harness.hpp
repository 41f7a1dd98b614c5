#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nailforce/alignment.hpp"
#include "nailforce/core.hpp"
#include "nailforce/gp.hpp"
#include "nailforce/imaging.hpp"
#include "nailforce/neural.hpp"
#include "nailforce/synthgen.hpp"
#include "nailforce/util.hpp"

namespace nailforce::harness {

using Matrix = Eigen::MatrixXd;

// ----------------------------------------------------------------- splits

enum class SchemeKind { PerCombinationHoldout, SurfaceCross, TimeCross, ParticipantCross, SingleModelAll };
std::string_view to_string(SchemeKind k);
SchemeKind scheme_from_string(std::string_view s);

struct SplitScheme {
  SchemeKind kind = SchemeKind::PerCombinationHoldout;
  int held_out_surface = 3;
  int held_out_session = 1;
  int held_out_participant = 3;
  double validation_fraction = 0.0;  // of the non-test trials; 0.25 for neural predictors
  double data_fraction = 1.0;        // training samples kept (single-model-all)
  double inducing_fraction = 0.17;   // single-model-all
  int min_repetitions = 2;           // per combination, holdout schemes
};

// One tag per trial. Holdout schemes send exactly one repetition of every
// (participant, session, weight, surface) combination to test; validation is
// drawn per combination from the rest. Throws SchemeInfeasible.
std::vector<SplitTag> make_splits(std::span<const TrialKey> trials, const SplitScheme& scheme,
                                  Rng& rng);
Dataset make_dataset(std::vector<TrialKey> trials, const SplitScheme& scheme, Rng& rng);

// ---------------------------------------------------------------- metrics

double rmse(std::span<const double> pred, std::span<const double> truth);

inline constexpr int kPercentileBins = 21;

struct BinPoint {
  double percentile = 0.0;  // 0, 5, ..., 100
  double mean_truth = 0.0;
  double rmse = 0.0;
  std::size_t count = 0;
};

// Bin b collects the samples whose truth lies between the empirical
// (linear-interpolated) quantiles at 5b - 2.5 and 5b + 2.5 percent, clipped to
// [0, 100]. A bin that falls between two samples takes the sample nearest to
// its center quantile.
std::array<BinPoint, kPercentileBins> percentile_binned_rmse(std::span<const double> pred,
                                                             std::span<const double> truth);

struct DerivedQuantities {
  double magnitude = 0.0;   // |f|
  double tangential = 0.0;  // |(fx, fy)|, the load force
  double angle_deg = 0.0;   // atan2(tangential, fz)
  std::optional<double> ratio;  // fz / tangential when tangential >= 0.2 N
};
inline constexpr double kMinTangential = 0.2;
DerivedQuantities derived_quantities(const TargetVector& t);

struct StaticDiagnostics {
  std::size_t samples = 0;
  double mean_abs_fz_difference = 0.0;  // |fz thumb - fz index|
  double mean_abs_balance_error = 0.0;  // |fx thumb + fx index - weight g|
};

struct EvalReport {
  std::string predictor;
  std::string scheme;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::array<double, kTargetDim> component_rmse{};
  std::array<double, kTargetDim> mean_predictive_std{};
  double magnitude_rmse = 0.0;
  double angle_rmse_deg = 0.0;
  double ratio_rmse = 0.0;  // NaN when no sample qualifies
  std::size_t ratio_samples = 0;
  std::array<std::array<BinPoint, kPercentileBins>, kTargetDim> bins{};
  std::optional<StaticDiagnostics> static_diagnostics;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  // Long-format CSV: one row per (component, bin) plus summary rows.
  std::string to_csv() const;
  std::string summary() const;
  bool operator==(const EvalReport& other) const;
};

struct PredictionSet {
  std::vector<TargetVector> truth;
  std::vector<TargetVector> pred;
  std::vector<TargetVector> std;  // predictive std (0 when unavailable)
};
EvalReport evaluate(const PredictionSet& p, const std::string& predictor, const std::string& scheme);

// ------------------------------------------------------------- predictors

enum class PredictorKind { GpExact, GpFitc, Cnn, NnFd, RnnFd };
std::string_view to_string(PredictorKind k);
PredictorKind predictor_from_string(std::string_view s);
bool is_neural(PredictorKind k);

// Samples of flattened aligned images. Rows of one trial are consecutive and in
// frame order; `sequence` identifies the trial.
struct SampleSet {
  int image_height = 0;
  int image_width = 0;
  Matrix X;  // N x d, features in [0,1]
  Matrix Y;  // N x 8
  std::vector<int> sequence;
  std::vector<double> time;

  std::size_t size() const { return static_cast<std::size_t>(X.rows()); }
  SampleSet subset(std::span<const std::size_t> rows) const;
};

struct PredictorConfig {
  PredictorKind kind = PredictorKind::GpExact;
  gp::OptimizerConfig gp;
  double inducing_fraction = 0.17;
  nn::TrainConfig train;
  nn::CnnSpec cnn;
  int rnn_hidden = 100;
  int rnn_window = 32;
  double nn_drop = 0.3;
  int jobs = 1;
  std::uint64_t seed = 1;
};

struct ModelOutput {
  Matrix mean;  // N x 8
  Matrix std;   // N x 8
};

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual PredictorKind kind() const = 0;
  virtual void fit(const SampleSet& train, const SampleSet* validation) = 0;
  virtual ModelOutput predict(const SampleSet& samples) const = 0;
  // Self-describing state: JSON header and a flat payload of doubles.
  virtual std::string header_json() const = 0;
  virtual std::vector<double> payload() const = 0;
};

std::unique_ptr<Predictor> make_predictor(const PredictorConfig& config);

// Binary container: magic, header length, JSON header, raw little-endian doubles.
void save_model(const std::string& path, const Predictor& model);
std::unique_ptr<Predictor> load_model(const std::string& path);

// --------------------------------------------------------------- pipeline

struct PipelineConfig {
  // Data source: an existing dataset directory, or in-memory generation.
  std::string dataset_dir;
  synth::GeneratorConfig generator;
  std::string work_dir;  // artifacts; empty keeps everything in memory

  SplitScheme scheme;
  PredictorConfig predictor;
  bool per_participant = true;  // one model per participant (holdout schemes)

  int frame_stride = 6;      // frames kept per trial: every stride-th synchronized frame
  int frame_phase = 0;       // first kept frame
  int test_frame_stride = 1; // test trials keep denser sequences for smoothing
  int canvas_height = 0;     // 0 = frame height
  int canvas_width = 0;
  align::AlignmentConfig alignment;
  imaging::SegmentationConfig segmentation;
  double reference_max_fz = 0.05;  // N, low-force reference frame
  int smooth_span = 9;             // 0 or 1 disables smoothing
  double feature_blur = 1.5;       // px, Gaussian low-pass on predictor input; 0 disables
  int jobs = 1;
  std::uint64_t seed = 1;

  static PipelineConfig from(const KeyValueConfig& kv);
  void validate() const;
};

// Preprocessed trial: synchronized, calibrated labels and aligned features.
struct ProcessedTrial {
  TrialKey key;
  std::string name;
  Finger finger = Finger::Index;
  double sync_offset_s = 0.0;
  std::vector<double> time;            // synchronized frame times kept
  std::vector<int> frame_index;
  std::vector<TargetVector> labels;    // calibrated targets
  std::vector<std::vector<double>> features;  // aligned green channel
  calib::ContactPoint contact;
  std::optional<std::array<double, 2>> static_window;  // generator truth, when known
};

struct PipelineResult {
  EvalReport report;
  PredictionSet predictions;
  std::vector<std::string> test_trials;
  std::vector<std::vector<int>> test_frames;  // frame indices per test trial, in prediction order
};

// Stage-tagged failure, e.g. "align: ...".
class StageError : public Error {
 public:
  StageError(std::string stage, const Error& e)
      : Error(e.kind(), stage + ": " + e.what()), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Label and image preparation for one trial against a participant reference
// (blue-channel estimation frame of the canonical canvas). `stride` picks frames.
ProcessedTrial process_trial(const Trial& trial, const ImageFrame& reference,
                             const PipelineConfig& config, int stride);
// Canonical, segmented, centered frame.
ImageFrame canonical_frame(const ImageFrame& frame, const PipelineConfig& config);

// First synchronized frame of `trial` whose calibrated |fz| is at most
// reference_max_fz, in canonical form. Throws StageError("align").
ImageFrame reference_frame(const Trial& trial, const PipelineConfig& config);

// Stacks processed trials into one sample set, one sequence id per trial.
SampleSet make_samples(std::span<const ProcessedTrial* const> trials, int height, int width);

PipelineResult run_pipeline(const PipelineConfig& config);

}  // namespace nailforce::harness
