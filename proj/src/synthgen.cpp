#include "nailforce/synthgen.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "nailforce/dataset_io.hpp"

namespace fs = std::filesystem;

namespace nailforce::synth {

namespace {

constexpr std::array<double, kPhaseCount> kNominalPhase = {0.5, 0.3, 0.6, 0.3, 1.2,
                                                           0.5, 0.4, 0.3, 0.5};
constexpr double kLeadIn = 0.2;
constexpr double kPhaseJitter = 0.2;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double smoothstep(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

std::array<double, 3> hsv_rgb(double h, double s, double v) {
  return imaging::hsv_to_rgb({h, s, v});
}

std::vector<ParticipantStyle::Wave> make_waves(Rng& rng, int n, double kmin, double kmax,
                                               double amp) {
  std::vector<ParticipantStyle::Wave> w;
  for (int i = 0; i < n; ++i) {
    const double k = uniform(rng, kmin, kmax);
    const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    w.push_back({k * std::cos(a), k * std::sin(a), uniform(rng, 0.0, 2.0 * std::numbers::pi), amp});
  }
  return w;
}

double waves(const std::vector<ParticipantStyle::Wave>& w, double u, double v) {
  double s = 0.0;
  for (const auto& x : w) s += x.amp * std::sin(x.ku * u + x.kv * v + x.phase);
  return s;
}

}  // namespace

// ------------------------------------------------------------------ style

ParticipantStyle make_style(std::uint64_t seed, int participant, Finger finger, int session,
                            double session_drift) {
  const std::uint64_t key = static_cast<std::uint64_t>(participant) * 2 + (finger == Finger::Thumb);
  Rng rng = derive_rng(seed ^ 0x5354594c45ULL, key);
  ParticipantStyle s;
  s.nail_rgb = hsv_rgb(uniform(rng, 4.0, 12.0), uniform(rng, 0.42, 0.52), uniform(rng, 0.80, 0.88));
  s.background_rgb =
      hsv_rgb(uniform(rng, 50.0, 62.0), uniform(rng, 0.30, 0.40), uniform(rng, 0.70, 0.80));
  s.semi_axis_rows = 0.34 + uniform(rng, -0.02, 0.02);
  s.semi_axis_cols = 0.36 + uniform(rng, -0.02, 0.02);
  std::array<std::array<double, 2>, kTargetDim> layout = {{{-0.5, -0.5},
                                                           {-0.5, 0.0},
                                                           {-0.5, 0.5},
                                                           {0.0, -0.5},
                                                           {0.0, 0.5},
                                                           {0.5, -0.5},
                                                           {0.5, 0.0},
                                                           {0.5, 0.5}}};
  std::shuffle(layout.begin(), layout.end(), rng);
  for (std::size_t k = 0; k < kTargetDim; ++k) {
    s.blob_center[k] = {layout[k][0] + uniform(rng, -0.08, 0.08),
                        layout[k][1] + uniform(rng, -0.08, 0.08)};
  }
  for (auto& ch : s.gain) {
    for (double& g : ch) {
      g = uniform(rng, 0.6, 1.2) * (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0);
    }
  }
  s.texture_rg = make_waves(rng, 3, 2.0, 5.0, 0.01);
  s.texture_b = make_waves(rng, 5, 6.0, 18.0, 0.025);
  if (session > 0 && session_drift > 0.0) {
    Rng drift = derive_rng(seed ^ 0x44524946ULL, key * 64 + static_cast<std::uint64_t>(session));
    std::normal_distribution<double> n01;
    s.lighting_gain = std::clamp(1.0 + 0.5 * session_drift * n01(drift), 0.7, 1.15);
    for (auto& ch : s.gain) {
      for (double& g : ch) g *= 1.0 + session_drift * n01(drift);
    }
    for (auto& c : s.blob_center) {
      c[0] += 0.2 * session_drift * n01(drift);
      c[1] += 0.2 * session_drift * n01(drift);
    }
  }
  return s;
}

// ----------------------------------------------------------------- config

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::Config, "generator config: " + m); };
  if (n_participants < 1 || repetitions < 1 || sessions < 1) fail("counts must be >= 1");
  if (weights.empty() || surfaces.empty()) fail("weights and surfaces must be non-empty");
  for (int w : weights) {
    if (!is_valid_weight(w)) fail("weights must be drawn from {165, 330, 660}");
  }
  for (int s : surfaces) {
    if (s < 1 || s > 12) fail("surface ids must be in 1..12");
  }
  if (!(frame_rate > 0) || !(force_rate > frame_rate)) fail("need 0 < frame_rate < force_rate");
  if (image_height < 16 || image_width < 16) fail("image must be at least 16x16");
  if (pixel_noise_sigma < 0 || force_noise_sigma < 0 || torque_noise_sigma < 0) {
    fail("noise sigmas must be >= 0");
  }
  if (!(led_mean_rate > 0) || led_mean_rate >= force_rate) fail("led_mean_rate out of range");
  double worst = kLeadIn;
  for (double d : kNominalPhase) worst += d * (1.0 + kPhaseJitter);
  if (trial_duration < worst) {
    std::ostringstream m;
    m << "trial_duration " << trial_duration << " s is too short for the 9 grasp phases (need >= "
      << worst << " s)";
    fail(m.str());
  }
  if (std::abs(true_camera_offset) >= trial_duration / 2) fail("|true_camera_offset| too large");
  if (max_warp_px < 0 || max_translation_px < 0) fail("warp and translation must be >= 0");
  if (!(gravity > 0)) fail("gravity must be positive");
}

GeneratorConfig GeneratorConfig::from(const KeyValueConfig& kv) {
  GeneratorConfig c;
  c.seed = static_cast<std::uint64_t>(kv.get("seed", static_cast<double>(c.seed)));
  c.n_participants = kv.get("n_participants", c.n_participants);
  c.weights = kv.get_ints("weights", c.weights);
  c.surfaces = kv.get_ints("surfaces", c.surfaces);
  c.repetitions = kv.get("repetitions", c.repetitions);
  c.sessions = kv.get("sessions", c.sessions);
  c.include_thumb = kv.get("include_thumb", c.include_thumb ? 1 : 0) != 0;
  c.frame_rate = kv.get("frame_rate", c.frame_rate);
  c.force_rate = kv.get("force_rate", c.force_rate);
  c.image_height = kv.get("image_height", c.image_height);
  c.image_width = kv.get("image_width", c.image_width);
  c.pixel_noise_sigma = kv.get("pixel_noise_sigma", c.pixel_noise_sigma);
  c.force_noise_sigma = kv.get("force_noise_sigma", c.force_noise_sigma);
  c.torque_noise_sigma = kv.get("torque_noise_sigma", c.torque_noise_sigma);
  c.led_mean_rate = kv.get("led_mean_rate", c.led_mean_rate);
  c.trial_duration = kv.get("trial_duration", c.trial_duration);
  c.true_camera_offset = kv.get("true_camera_offset", c.true_camera_offset);
  c.max_warp_px = kv.get("max_warp_px", c.max_warp_px);
  c.max_translation_px = kv.get("max_translation_px", c.max_translation_px);
  c.marker_offset_deg = kv.get("marker_offset_deg", c.marker_offset_deg);
  c.marker_wobble_deg = kv.get("marker_wobble_deg", c.marker_wobble_deg);
  c.gravity = kv.get("gravity", c.gravity);
  c.session_drift = kv.get("session_drift", c.session_drift);
  c.validate();
  return c;
}

KeyValueConfig GeneratorConfig::to_config() const {
  KeyValueConfig kv;
  auto num = [](double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
  };
  auto ints = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  kv.set("seed", std::to_string(seed));
  kv.set("n_participants", std::to_string(n_participants));
  kv.set("weights", ints(weights));
  kv.set("surfaces", ints(surfaces));
  kv.set("repetitions", std::to_string(repetitions));
  kv.set("sessions", std::to_string(sessions));
  kv.set("include_thumb", include_thumb ? "1" : "0");
  kv.set("frame_rate", num(frame_rate));
  kv.set("force_rate", num(force_rate));
  kv.set("image_height", std::to_string(image_height));
  kv.set("image_width", std::to_string(image_width));
  kv.set("pixel_noise_sigma", num(pixel_noise_sigma));
  kv.set("force_noise_sigma", num(force_noise_sigma));
  kv.set("torque_noise_sigma", num(torque_noise_sigma));
  kv.set("led_mean_rate", num(led_mean_rate));
  kv.set("trial_duration", num(trial_duration));
  kv.set("true_camera_offset", num(true_camera_offset));
  kv.set("max_warp_px", num(max_warp_px));
  kv.set("max_translation_px", std::to_string(max_translation_px));
  kv.set("marker_offset_deg", num(marker_offset_deg));
  kv.set("marker_wobble_deg", num(marker_wobble_deg));
  kv.set("gravity", num(gravity));
  kv.set("session_drift", num(session_drift));
  return kv;
}

std::size_t GeneratorConfig::trial_count() const {
  return static_cast<std::size_t>(n_participants) * sessions * weights.size() * surfaces.size() *
         repetitions * (include_thumb ? 2 : 1);
}

// ---------------------------------------------------------------- profile

Phase WrenchProfile::phase_at(double t) const {
  for (int i = kPhaseCount - 1; i >= 0; --i) {
    if (t >= boundaries[i]) return static_cast<Phase>(i);
  }
  return Phase::Reach;
}

Wrench WrenchProfile::at(double t, Finger finger) const {
  // (grip, load fraction) at each phase boundary
  const double g_s = grip_static, g_r = grip_release;
  const std::array<double, kPhaseCount + 1> grip = {0.0, 0.0, grip_preload, g_s, g_s,
                                                    g_s, g_r, g_r, 0.6 * g_r, 0.0};
  const std::array<double, kPhaseCount + 1> load = {0, 0, 0, 1, 1, 1, 0, 0, 0, 0};
  Wrench w;
  w.timestamp = t;
  if (t <= boundaries.front() || t >= boundaries.back()) return w;
  int i = static_cast<int>(phase_at(t));
  const double u = (t - boundaries[i]) / (boundaries[i + 1] - boundaries[i]);
  const double s = smoothstep(u);
  double g = grip[i] + (grip[i + 1] - grip[i]) * s;
  const double frac = load[i] + (load[i + 1] - load[i]) * s;
  if (static_cast<Phase>(i) == Phase::Transitional) {
    g += grip_overshoot * std::sin(std::numbers::pi * u);
  }
  const int f = finger == Finger::Thumb ? 1 : 0;
  const double total = frac == 1.0 ? weight_n : weight_n * frac;
  const double index_load = index_share * total;
  const double l = f == 0 ? index_load : total - index_load;
  w.f = {l, lateral[f] * l, g};
  w.tau = {torque_per_load[f][0] * l, torque_per_load[f][1] * l, torque_per_load[f][2] * l};
  return w;
}

WrenchProfile make_wrench_profile(const GeneratorConfig& config, int weight_g,
                                  const SurfaceSpec& surface, Rng& rng) {
  if (!is_valid_weight(weight_g)) {
    throw Error(ErrorKind::InvalidInput, "wrench profile: weight must be 165, 330 or 660 g");
  }
  WrenchProfile p;
  double t = kLeadIn;
  for (int i = 0; i < kPhaseCount; ++i) {
    p.boundaries[i] = t;
    t += kNominalPhase[i] * uniform(rng, 1.0 - kPhaseJitter, 1.0 + kPhaseJitter);
  }
  p.boundaries[kPhaseCount] = t;
  if (t > config.trial_duration) {
    throw Error(ErrorKind::Config, "trial_duration too short for the 9 grasp phases");
  }
  p.weight_n = weight_g / 1000.0 * config.gravity;
  p.index_share = uniform(rng, 0.4, 0.6);
  const double max_load = p.weight_n * std::max(p.index_share, 1.0 - p.index_share);
  // lower friction on silk calls for a larger grip:load ratio
  const double ratio = surface.material == Material::Silk ? uniform(rng, 3.2, 3.7)
                                                          : uniform(rng, 1.8, 2.4);
  p.grip_preload = uniform(rng, 0.8, 1.2);
  p.grip_static = std::max(ratio * max_load, p.grip_preload + 0.2);
  p.grip_overshoot = std::min(uniform(rng, 0.0, 0.04) * p.grip_static, 14.95 - p.grip_static);
  p.grip_release = uniform(rng, 0.4, 0.6) * p.grip_static;
  for (int f = 0; f < 2; ++f) {
    p.lateral[f] = uniform(rng, -0.3, 0.15);
    p.torque_per_load[f] = {uniform(rng, -5.0, 5.0), uniform(rng, -6.0, 3.0), uniform(rng, -7.0, 6.0)};
  }
  return p;
}

SampledProfile generate_wrench_profile(const GeneratorConfig& config, int weight_g,
                                       const SurfaceSpec& surface, Rng& rng) {
  config.validate();
  SampledProfile s;
  s.profile = make_wrench_profile(config, weight_g, surface, rng);
  const auto n = static_cast<std::size_t>(std::llround(config.trial_duration * config.force_rate));
  for (std::size_t k = 0; k < n; ++k) {
    const double t = static_cast<double>(k) / config.force_rate;
    s.index.push_back(s.profile.at(t, Finger::Index));
    s.thumb.push_back(s.profile.at(t, Finger::Thumb));
  }
  return s;
}

// -------------------------------------------------------------- rendering

double component_scale(std::size_t k) {
  static constexpr std::array<double, kTargetDim> s = {4.0, 2.0, 15.0, 26.0, 30.0, 35.0, 200.0, 200.0};
  return s.at(k);
}

bool inside_nail(const ParticipantStyle& style, int height, int width, double r, double c,
                 double center_r, double center_c) {
  const double u = (r - center_r) / (style.semi_axis_rows * height);
  const double v = (c - center_c) / (style.semi_axis_cols * width);
  return u * u + v * v <= 1.0;
}

namespace {

// Blob responses B_k at normalized nail coordinates.
std::array<double, kTargetDim> blobs(const ParticipantStyle& style, double u, double v) {
  std::array<double, kTargetDim> b{};
  const double inv = 1.0 / (2.0 * style.blob_sigma * style.blob_sigma);
  for (std::size_t k = 0; k < kTargetDim; ++k) {
    const double du = u - style.blob_center[k][0], dv = v - style.blob_center[k][1];
    b[k] = std::exp(-(du * du + dv * dv) * inv);
  }
  return b;
}

// All three channels at once (noise free, unclamped).
std::array<double, 3> render_rgb(const TargetVector& target, const ParticipantStyle& style,
                                 int height, int width, double r, double c, double cr, double cc) {
  const double L = style.lighting_gain;
  if (!inside_nail(style, height, width, r, c, cr, cc)) {
    return {L * style.background_rgb[0], L * style.background_rgb[1], L * style.background_rgb[2]};
  }
  const double u = (r - cr) / (style.semi_axis_rows * height);
  const double v = (c - cc) / (style.semi_axis_cols * width);
  const auto b = blobs(style, u, v);
  const double trg = waves(style.texture_rg, u, v);
  std::array<double, 3> out{};
  for (int ch = 0; ch < 2; ++ch) {
    double s = 0.0;
    for (std::size_t k = 0; k < kTargetDim; ++k) {
      s += style.gain[ch][k] * (target[k] / component_scale(k)) * b[k];
    }
    out[ch] = L * (style.nail_rgb[ch] + trg + style.amplitude[ch] * std::tanh(s));
  }
  out[2] = L * (style.nail_rgb[2] + waves(style.texture_b, u, v));
  return out;
}

}  // namespace

double render_intensity(const TargetVector& target, const ParticipantStyle& style, int height,
                        int width, double r, double c, int ch, double center_r, double center_c) {
  return render_rgb(target, style, height, width, r, c, center_r, center_c).at(ch);
}

ImageFrame render_nail_frame(const TargetVector& target, const ParticipantStyle& style,
                             const RenderOptions& options, Rng& rng) {
  const int H = options.height, W = options.width;
  ImageFrame img(H, W, 3);
  const double cr = (H - 1) / 2.0, cc = (W - 1) / 2.0;
  std::normal_distribution<double> noise(0.0, options.noise_sigma > 0 ? options.noise_sigma : 1.0);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      const auto rgb = render_rgb(target, style, H, W, r, c, cr, cc);
      for (int ch = 0; ch < 3; ++ch) {
        double v = rgb[ch];
        if (options.noise_sigma > 0) v += noise(rng);
        img.at(r, c, ch) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

imaging::Mask canonical_mask(const ParticipantStyle& style, int height, int width) {
  imaging::Mask m(height, width);
  const double cr = (height - 1) / 2.0, cc = (width - 1) / 2.0;
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) m.set(r, c, inside_nail(style, height, width, r, c, cr, cc));
  }
  return m;
}

TargetVector invert_render(const ImageFrame& image, const ParticipantStyle& style) {
  if (image.channels() != 3) throw Error(ErrorKind::InvalidInput, "invert_render: need RGB");
  const int H = image.height(), W = image.width();
  const double cr = (H - 1) / 2.0, cc = (W - 1) / 2.0;
  const double L = style.lighting_gain;
  struct Px {
    std::array<double, kTargetDim> b;
    double base;
    double value;
    int ch;
  };
  std::vector<Px> px;
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      if (!inside_nail(style, H, W, r, c, cr, cc)) continue;
      const double u = (r - cr) / (style.semi_axis_rows * H);
      const double v = (c - cc) / (style.semi_axis_cols * W);
      const auto b = blobs(style, u, v);
      const double trg = waves(style.texture_rg, u, v);
      for (int ch = 0; ch < 2; ++ch) px.push_back({b, style.nail_rgb[ch] + trg, image.at(r, c, ch), ch});
    }
  }
  const Eigen::Index n = static_cast<Eigen::Index>(px.size());
  Eigen::MatrixXd A(n, kTargetDim);
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Px& p = px[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < kTargetDim; ++k) {
      A(i, static_cast<Eigen::Index>(k)) = style.gain[p.ch][k] * p.b[k];
    }
    const double q = (p.value / L - p.base) / style.amplitude[p.ch];
    z(i) = std::atanh(std::clamp(q, -0.995, 0.995));
  }
  Eigen::VectorXd x = A.colPivHouseholderQr().solve(z);
  // Gauss-Newton on intensities
  for (int it = 0; it < 20; ++it) {
    const Eigen::VectorXd s = A * x;
    Eigen::VectorXd res(n);
    Eigen::MatrixXd J(n, kTargetDim);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Px& p = px[static_cast<std::size_t>(i)];
      const double th = std::tanh(s(i));
      res(i) = p.value - L * (p.base + style.amplitude[p.ch] * th);
      J.row(i) = (L * style.amplitude[p.ch] * (1.0 - th * th)) * A.row(i);
    }
    const Eigen::VectorXd dx = J.colPivHouseholderQr().solve(res);
    x += dx;
    if (dx.norm() < 1e-12 * (1.0 + x.norm())) break;
  }
  TargetVector t;
  for (std::size_t k = 0; k < kTargetDim; ++k) t[k] = x(static_cast<Eigen::Index>(k)) * component_scale(k);
  return t;
}

align::FfdTransform random_warp(int height, int width, double max_px, double spacing, Rng& rng) {
  align::FfdTransform T(height, width, {spacing, spacing, spacing});
  auto& g = T.level(0);
  std::normal_distribution<double> n01;
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.dx[i] = n01(rng);
    g.dy[i] = n01(rng);
  }
  const align::DisplacementField f = T.field();
  double mx = 0.0;
  for (std::size_t i = 0; i < f.dx.size(); ++i) mx = std::max(mx, std::hypot(f.dx[i], f.dy[i]));
  const double scale = mx > 0 ? max_px / mx : 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.dx[i] *= scale;
    g.dy[i] *= scale;
  }
  return T;
}

ImageFrame render_observation(const TargetVector& target, const ParticipantStyle& style,
                              const FrameGeometry& geometry, int height, int width, int led_on,
                              double noise_sigma, Rng& rng) {
  const align::DisplacementField f = geometry.warp.field();
  const double cr = (height - 1) / 2.0, cc = (width - 1) / 2.0;
  ImageFrame img(height, width, 3);
  const LedPatch led;
  const double led_value = led_on ? 0.95 : 0.1;
  std::normal_distribution<double> noise(0.0, noise_sigma > 0 ? noise_sigma : 1.0);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      std::array<double, 3> rgb;
      if (r >= led.row && r < led.row + led.size && c >= led.col && c < led.col + led.size) {
        rgb = {led_value, led_value, led_value};
      } else {
        const std::size_t i = f.index(r, c);
        rgb = render_rgb(target, style, height, width, r + f.dy[i] - geometry.shift_row,
                         c + f.dx[i] - geometry.shift_col, cr, cc);
      }
      for (int ch = 0; ch < 3; ++ch) {
        double v = rgb[ch];
        if (noise_sigma > 0) v += noise(rng);
        img.at(r, c, ch) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

imaging::Mask observation_mask(const ParticipantStyle& style, const FrameGeometry& geometry,
                               int height, int width) {
  const align::DisplacementField f = geometry.warp.field();
  const double cr = (height - 1) / 2.0, cc = (width - 1) / 2.0;
  imaging::Mask m(height, width);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const std::size_t i = f.index(r, c);
      m.set(r, c, inside_nail(style, height, width, r + f.dy[i] - geometry.shift_row,
                              c + f.dx[i] - geometry.shift_col, cr, cc));
    }
  }
  return m;
}

// ------------------------------------------------------------------ trials

std::vector<TrialId> enumerate_trials(const GeneratorConfig& config) {
  config.validate();
  std::vector<TrialId> out;
  std::size_t grasp = 0;
  for (int p = 1; p <= config.n_participants; ++p) {
    for (int s = 0; s < config.sessions; ++s) {
      for (int w : config.weights) {
        for (int surf : config.surfaces) {
          for (int r = 0; r < config.repetitions; ++r, ++grasp) {
            for (int f = 0; f < (config.include_thumb ? 2 : 1); ++f) {
              TrialId id;
              id.participant = p;
              id.session = s;
              id.finger = f ? Finger::Thumb : Finger::Index;
              id.weight_g = w;
              id.surface_id = surf;
              id.repetition = r;
              id.grasp = grasp;
              id.index = out.size();
              out.push_back(id);
            }
          }
        }
      }
    }
  }
  return out;
}

std::string trial_name(const TrialId& id) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "p%02d_s%d_%s_w%03d_c%02d_r%d", id.participant, id.session,
                std::string(to_string(id.finger)).c_str(), id.weight_g, id.surface_id,
                id.repetition);
  return buf;
}

GeneratedTrial generate_trial(const GeneratorConfig& config, const TrialId& id) {
  config.validate();
  const SurfaceSpec grasp_surface = surface_by_id(id.surface_id);
  const SurfaceSpec surface = id.finger == Finger::Thumb ? thumb_surface() : grasp_surface;
  // the profile is shared by both fingers of a grasp
  Rng grasp_rng = derive_rng(config.seed ^ 0x4752415350ULL, id.grasp);
  const WrenchProfile profile = make_wrench_profile(config, id.weight_g, grasp_surface, grasp_rng);
  Rng rng = derive_rng(config.seed, id.index);
  const ParticipantStyle style =
      make_style(config.seed, id.participant, id.finger, id.session, config.session_drift);

  GeneratedTrial g;
  Trial& t = g.trial;
  TrialTruth& truth = g.truth;
  t.name = trial_name(id);
  t.participant = id.participant;
  t.session = id.session;
  t.repetition = id.repetition;
  t.finger = id.finger;
  t.weight_g = id.weight_g;
  t.surface = surface;
  truth.profile = profile;
  truth.camera_offset = config.true_camera_offset;
  truth.marker_offset_deg = config.marker_offset_deg;

  // contact point on the surface, clear of a prism ridge
  double cx = uniform(rng, -3.0, 3.0), cy = uniform(rng, -3.0, 3.0);
  if (surface.shape == SurfaceShape::Prism) cy = (cy < 0 ? -1.0 : 1.0) * (0.5 + std::abs(cy) * 2.5 / 3.0);
  truth.contact = {cx, cy, surface.height(cx, cy)};

  t.reference_marker_angle_deg = uniform(rng, -10.0, 10.0);
  const double wob_amp = uniform(rng, 0.0, config.marker_wobble_deg);
  const double wob_period = uniform(rng, 2.0, 4.0);
  const double wob_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  auto rotation = [&](double time) {
    return wob_amp * std::sin(2.0 * std::numbers::pi * time / wob_period + wob_phase);
  };

  const auto n_force = static_cast<std::size_t>(std::llround(config.trial_duration * config.force_rate));
  const auto n_frames = static_cast<std::size_t>(std::llround(config.trial_duration * config.frame_rate));
  std::normal_distribution<double> n01;
  for (std::size_t k = 0; k < n_force; ++k) {
    const double time = static_cast<double>(k) / config.force_rate;
    const Wrench tip = profile.at(time, id.finger);
    truth.tip_wrenches.push_back(tip);
    Wrench s;
    s.timestamp = time;
    s.f = calib::rotate_forces(tip.f, 0.0, rotation(time));
    const Vec3 shift = calib::torque_shift(s.f, truth.contact);
    for (int a = 0; a < 3; ++a) s.tau[a] = tip.tau[a] + shift[a];
    if (config.force_noise_sigma > 0) {
      for (double& v : s.f) v += config.force_noise_sigma * n01(rng);
    }
    if (config.torque_noise_sigma > 0) {
      for (double& v : s.tau) v += config.torque_noise_sigma * n01(rng);
    }
    t.wrenches.push_back(s);
  }

  // LED telegraph on the force grid, long enough to cover the camera span
  const double cam_end = config.true_camera_offset + static_cast<double>(n_frames) / config.frame_rate;
  const long long k0 = std::min<long long>(0, static_cast<long long>(std::floor(config.true_camera_offset * config.force_rate)) - 2);
  const long long k1 = std::max<long long>(static_cast<long long>(n_force),
                                           static_cast<long long>(std::ceil(cam_end * config.force_rate)) + 2);
  std::vector<int> states(static_cast<std::size_t>(k1 - k0));
  std::bernoulli_distribution flip(config.led_mean_rate / config.force_rate);
  states[0] = std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
  for (std::size_t i = 1; i < states.size(); ++i) states[i] = flip(rng) ? 1 - states[i - 1] : states[i - 1];
  auto led_at = [&](double time) {
    const auto k = static_cast<long long>(std::ceil(time * config.force_rate - 0.5 - 1e-9));
    return states[static_cast<std::size_t>(std::clamp(k, k0, k1 - 1) - k0)];
  };
  for (std::size_t k = 0; k < n_force; ++k) t.led_force.push_back(states[static_cast<std::size_t>(static_cast<long long>(k) - k0)]);

  const int H = config.image_height, W = config.image_width;
  const double spacing = std::max(H, W) / 3.0;
  std::uniform_int_distribution<int> shift(-config.max_translation_px, config.max_translation_px);
  for (std::size_t i = 0; i < n_frames; ++i) {
    const double cam_time = static_cast<double>(i) / config.frame_rate;
    const double time = cam_time + config.true_camera_offset;
    const Wrench tip = profile.at(time, id.finger);
    const TargetVector target = TargetVector::from(tip, surface.c1, surface.c2);
    FrameGeometry geo;
    geo.warp = random_warp(H, W, config.max_warp_px, spacing, rng);
    geo.shift_row = shift(rng);
    geo.shift_col = shift(rng);
    const int led = led_at(time);
    ImageFrame frame = render_observation(target, style, geo, H, W, led, config.pixel_noise_sigma, rng);
    frame.set_timestamp(cam_time);
    t.frames.push_back(std::move(frame));
    t.led_video.push_back(led);
    const double rot = rotation(time);
    t.marker_angle_deg.push_back(t.reference_marker_angle_deg + rot - config.marker_offset_deg);
    truth.frame_times.push_back(time);
    truth.frame_targets.push_back(target);
    truth.geometry.push_back(std::move(geo));
    truth.marker_rotation_deg.push_back(rot);
  }
  return g;
}

void write_truth(const std::string& dir, const TrialTruth& truth) {
  fs::create_directories(dir);
  io::Table tab;
  tab.header = {"frame", "time"};
  for (auto n : kComponentNames) tab.header.emplace_back(n);
  tab.header.insert(tab.header.end(), {"shift_row", "shift_col", "rotation_deg"});
  for (std::size_t i = 0; i < truth.frame_times.size(); ++i) {
    std::vector<double> row{static_cast<double>(i), truth.frame_times[i]};
    for (std::size_t k = 0; k < kTargetDim; ++k) row.push_back(truth.frame_targets[i][k]);
    row.push_back(truth.geometry[i].shift_row);
    row.push_back(truth.geometry[i].shift_col);
    row.push_back(truth.marker_rotation_deg[i]);
    tab.rows.push_back(std::move(row));
  }
  io::write_csv((fs::path(dir) / "truth.csv").string(), tab);
  std::ofstream out(fs::path(dir) / "truth_meta");
  if (!out) throw Error(ErrorKind::Io, "cannot write truth_meta in " + dir);
  out << std::setprecision(17) << "contact_x = " << truth.contact.x << "\ncontact_y = " << truth.contact.y
      << "\ncontact_z = " << truth.contact.z << "\ncamera_offset = " << truth.camera_offset
      << "\nmarker_offset_deg = " << truth.marker_offset_deg << "\nphase_boundaries = ";
  for (int i = 0; i <= kPhaseCount; ++i) out << (i ? "," : "") << truth.profile.boundaries[i];
  out << '\n';
}

std::vector<std::string> write_dataset(const GeneratorConfig& config, const std::string& root,
                                       int jobs) {
  const auto ids = enumerate_trials(config);
  fs::create_directories(root);
  std::vector<std::string> dirs(ids.size());
  parallel_for(ids.size(), jobs, [&](std::size_t i) {
    const GeneratedTrial g = generate_trial(config, ids[i]);
    dirs[i] = (fs::path(root) / g.trial.name).string();
    io::write_trial(dirs[i], g.trial);
    write_truth(dirs[i], g.truth);
  });
  std::ofstream cfg(fs::path(root) / "generator.cfg");
  cfg << config.to_config().to_text();
  return dirs;
}

}  // namespace nailforce::synth
