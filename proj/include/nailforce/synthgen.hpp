#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nailforce/alignment.hpp"
#include "nailforce/calibration.hpp"
#include "nailforce/core.hpp"
#include "nailforce/imaging.hpp"
#include "nailforce/util.hpp"

namespace nailforce::synth {

// Per-participant (and per-finger, per-session) color map of the nail.
struct ParticipantStyle {
  std::array<double, 3> nail_rgb{};
  std::array<double, 3> background_rgb{};
  double semi_axis_rows = 0.34;  // nail ellipse, fraction of canvas height
  double semi_axis_cols = 0.36;  // fraction of canvas width
  // Blob centers in normalized nail coordinates, one per target component.
  std::array<std::array<double, 2>, kTargetDim> blob_center{};
  double blob_sigma = 0.3;
  // Response gains of the red (0) and green (1) channels per component.
  std::array<std::array<double, kTargetDim>, 2> gain{};
  std::array<double, 2> amplitude{0.05, 0.1};
  struct Wave {
    double ku, kv, phase, amp;
  };
  std::vector<Wave> texture_rg;  // shared by red and green
  std::vector<Wave> texture_b;   // blue alignment texture
  double lighting_gain = 1.0;
};

// Deterministic style for (seed, participant, finger, session); sessions > 0
// drift the lighting and color map by `session_drift`.
ParticipantStyle make_style(std::uint64_t seed, int participant, Finger finger, int session,
                            double session_drift);

struct GeneratorConfig {
  std::uint64_t seed = 1;
  int n_participants = 5;
  std::vector<int> weights{165, 330, 660};
  std::vector<int> surfaces{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  int repetitions = 5;
  int sessions = 1;
  bool include_thumb = false;
  double frame_rate = 24.0;
  double force_rate = 100.0;
  int image_height = 111;
  int image_width = 105;
  double pixel_noise_sigma = 0.02;
  double force_noise_sigma = 0.0;   // N
  double torque_noise_sigma = 0.0;  // N*mm
  double led_mean_rate = 4.0;       // switches per second
  double trial_duration = 6.0;      // s
  double true_camera_offset = 0.25; // s, camera start on the force clock
  double max_warp_px = 1.5;
  int max_translation_px = 4;
  double marker_offset_deg = 0.0;   // marker mounting error
  double marker_wobble_deg = 3.0;
  double gravity = 9.82;
  double session_drift = 0.15;

  void validate() const;
  static GeneratorConfig from(const KeyValueConfig& kv);
  KeyValueConfig to_config() const;
  std::size_t trial_count() const;
};

enum class Phase {
  Reach,
  Preload,
  Loading,
  Transitional,
  Static,
  Replacement,
  Delay,
  PreUnload,
  Unloading,
};
inline constexpr int kPhaseCount = 9;

// Fingertip wrench profile of one grasp for both fingers, evaluable at any time.
class WrenchProfile {
 public:
  // boundaries[i] is the start of phase i; boundaries[9] the end of unloading.
  std::array<double, kPhaseCount + 1> boundaries{};
  double weight_n = 0.0;
  double index_share = 0.5;
  double grip_preload = 1.0;
  double grip_static = 1.0;
  double grip_overshoot = 0.0;
  double grip_release = 0.5;
  std::array<double, 2> lateral{};       // fy / load per finger (index, thumb)
  std::array<Vec3, 2> torque_per_load{};  // tau' / load per finger

  // Fingertip wrench (f in the fingertip frame, tau = tau').
  Wrench at(double t, Finger finger) const;
  Phase phase_at(double t) const;
  double static_begin() const { return boundaries[static_cast<int>(Phase::Static)]; }
  double static_end() const { return boundaries[static_cast<int>(Phase::Static) + 1]; }
};

WrenchProfile make_wrench_profile(const GeneratorConfig& config, int weight_g,
                                  const SurfaceSpec& surface, Rng& rng);

// Sampled profile on the force grid, noiseless, both fingers.
struct SampledProfile {
  WrenchProfile profile;
  std::vector<Wrench> index;
  std::vector<Wrench> thumb;
};
SampledProfile generate_wrench_profile(const GeneratorConfig& config, int weight_g,
                                       const SurfaceSpec& surface, Rng& rng);

// Per-component divisor that maps Table ranges to roughly unit scale.
double component_scale(std::size_t k);

struct RenderOptions {
  int height = 111;
  int width = 105;
  double noise_sigma = 0.0;
};

// Nail at the canonical center. Red/green respond to the target through
// base + amp * tanh(sum_k g_k (t_k / s_k) B_k(x)); blue is force-invariant.
ImageFrame render_nail_frame(const TargetVector& target, const ParticipantStyle& style,
                             const RenderOptions& options, Rng& rng);

// Noise-free intensity of channel ch at continuous canvas position (r, c) for
// a nail centered at (center_r, center_c).
double render_intensity(const TargetVector& target, const ParticipantStyle& style, int height,
                        int width, double r, double c, int ch, double center_r, double center_c);

bool inside_nail(const ParticipantStyle& style, int height, int width, double r, double c,
                 double center_r, double center_c);

// Mask of the nail at the canonical center.
imaging::Mask canonical_mask(const ParticipantStyle& style, int height, int width);

// Oracle inverse of the color map: recovers the target from a canonical-position
// image (atanh least squares, refined by Gauss-Newton on the forward model).
TargetVector invert_render(const ImageFrame& image, const ParticipantStyle& style);

// Smooth random single-level B-spline warp with max displacement max_px.
align::FfdTransform random_warp(int height, int width, double max_px, double spacing, Rng& rng);

// Frame geometry: observed(x) = canonical(x + warp(x) - shift).
struct FrameGeometry {
  align::FfdTransform warp;
  int shift_row = 0;
  int shift_col = 0;
};

inline constexpr int kLedSize = 5;
// LED patch ROI used by the generator.
struct LedPatch {
  int row = 1, col = 1, size = kLedSize;
};

ImageFrame render_observation(const TargetVector& target, const ParticipantStyle& style,
                              const FrameGeometry& geometry, int height, int width, int led_on,
                              double noise_sigma, Rng& rng);
// Nail mask of an observation (exact, from the geometry).
imaging::Mask observation_mask(const ParticipantStyle& style, const FrameGeometry& geometry,
                               int height, int width);

struct TrialTruth {
  std::vector<double> frame_times;           // force clock
  std::vector<TargetVector> frame_targets;   // fingertip frame, tau'
  std::vector<FrameGeometry> geometry;
  calib::ContactPoint contact;
  double camera_offset = 0.0;
  double marker_offset_deg = 0.0;
  std::vector<double> marker_rotation_deg;  // true theta - theta_r per frame
  WrenchProfile profile;
  std::vector<Wrench> tip_wrenches;          // noiseless fingertip wrenches, force grid
};

struct TrialId {
  int participant = 1;
  int session = 0;
  Finger finger = Finger::Index;
  int weight_g = 165;
  int surface_id = 1;
  int repetition = 0;
  std::size_t index = 0;  // global index, drives the rng stream
  std::size_t grasp = 0;  // shared by the two fingers of one grasp
};

// All trials of a config in deterministic order.
std::vector<TrialId> enumerate_trials(const GeneratorConfig& config);
std::string trial_name(const TrialId& id);

struct GeneratedTrial {
  Trial trial;
  TrialTruth truth;
};

GeneratedTrial generate_trial(const GeneratorConfig& config, const TrialId& id);

// Writes the truth sidecar (truth.csv and truth meta) into a trial directory.
void write_truth(const std::string& dir, const TrialTruth& truth);

// Generates and writes every trial under root (one directory per trial).
std::vector<std::string> write_dataset(const GeneratorConfig& config, const std::string& root,
                                       int jobs);

}  // namespace nailforce::synth
