#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nailforce {

enum class ErrorKind {
  InvalidInput,
  Config,
  Io,
  NoSignal,
  CannotCenter,
  IllConditioned,
  NoConsistentContact,
  Numerical,
  AlignmentFailed,
  TrainingFailed,
  SchemeInfeasible,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// Intensity grid in [0,1], row-major, channel-interleaved.
class ImageFrame {
 public:
  ImageFrame() = default;
  ImageFrame(int height, int width, int channels, double timestamp = 0.0);
  ImageFrame(int height, int width, int channels, std::vector<double> data,
             double timestamp = 0.0);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  double timestamp() const { return timestamp_; }
  void set_timestamp(double t) { timestamp_ = t; }
  bool empty() const { return data_.empty(); }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height_) * width_;
  }

  double at(int r, int c, int ch = 0) const {
    return data_[(static_cast<std::size_t>(r) * width_ + c) * channels_ + ch];
  }
  double& at(int r, int c, int ch = 0) {
    return data_[(static_cast<std::size_t>(r) * width_ + c) * channels_ + ch];
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  // Single channel as a new 1-channel frame.
  ImageFrame channel(int ch) const;
  // Clamp every intensity into [0,1].
  void clamp_unit();
  bool same_shape(const ImageFrame& other) const {
    return height_ == other.height_ && width_ == other.width_ &&
           channels_ == other.channels_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
  double timestamp_ = 0.0;
};

using Vec3 = std::array<double, 3>;

struct Wrench {
  Vec3 f{};    // N
  Vec3 tau{};  // N*mm
  double timestamp = 0.0;
};

enum class Material { Sandpaper, Silk };
enum class SurfaceShape { Flat, Sphere, Cylinder, Prism };
enum class Axis { X, Y };

// Contact surface geometry. Heights in mm, apex at the sensor origin, the
// surface bulges toward -z away from the finger.
struct SurfaceSpec {
  int id = 1;
  double c1 = 0.0;  // 1/m
  double c2 = 0.0;  // 1/m
  Material material = Material::Sandpaper;
  SurfaceShape shape = SurfaceShape::Flat;
  double radius_mm = 0.0;       // sphere / cylinder
  Axis cylinder_axis = Axis::X;  // cylinder axis direction
  double prism_angle_deg = 0.0;  // prism ridge inclination per side

  double height(double x, double y) const;
  // dh/dx, dh/dy at (x,y).
  std::array<double, 2> height_gradient(double x, double y) const;
  // Admissible |x|,|y| bound for the parametric height (inf for flat/prism).
  double domain_limit() const;
};

// The 12 laboratory contact surfaces, id 1..12.
SurfaceSpec surface_by_id(int id);
// Thumb sensor surface: flat sandpaper.
SurfaceSpec thumb_surface();
// Radius in mm for a curvature in 1/m; 0 for c <= 0.
double radius_from_curvature(double c);

enum class Component : std::size_t { Fx, Fy, Fz, Tx, Ty, Tz, C1, C2 };
inline constexpr std::size_t kTargetDim = 8;
inline constexpr std::array<std::string_view, kTargetDim> kComponentNames = {
    "fx", "fy", "fz", "tx", "ty", "tz", "c1", "c2"};

struct TargetVector {
  std::array<double, kTargetDim> values{};

  double& operator[](Component c) { return values[static_cast<std::size_t>(c)]; }
  double operator[](Component c) const {
    return values[static_cast<std::size_t>(c)];
  }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }

  static TargetVector from(const Wrench& w, double c1, double c2);
};

struct Range {
  double lo;
  double hi;
};
// Admissible ranges per component (N, N*mm, 1/m).
inline constexpr std::array<Range, kTargetDim> kTargetRanges = {{
    {-0.9, 4.0},
    {-2.0, 0.8},
    {0.0, 15.0},
    {-22.0, 26.0},
    {-30.0, 14.0},
    {-35.0, 27.0},
    {0.0, 200.0},
    {0.0, 200.0},
}};

// Components outside kTargetRanges; never mutates.
std::vector<Component> validate_ranges(const TargetVector& t);

enum class Finger { Index, Thumb };
std::string_view to_string(Finger f);
Finger finger_from_string(std::string_view s);

struct Trial {
  std::string name;
  int participant = 1;
  int session = 0;
  int repetition = 0;
  Finger finger = Finger::Index;
  int weight_g = 165;
  SurfaceSpec surface;
  std::vector<double> marker_angle_deg;  // theta per frame
  double reference_marker_angle_deg = 0.0;
  std::vector<ImageFrame> frames;
  std::vector<Wrench> wrenches;
  std::vector<int> led_video;
  std::vector<int> led_force;

  double frame_rate() const;
  double force_rate() const;
  // Throws InvalidInput when a structural invariant fails.
  void validate() const;
};

bool is_valid_weight(int grams);

enum class SplitTag { Train, Validation, Test };
std::string_view to_string(SplitTag t);

// Trial metadata sufficient for split construction.
struct TrialKey {
  int participant = 1;
  int session = 0;
  int weight_g = 165;
  int surface_id = 1;
  int repetition = 0;
};

struct Dataset {
  std::vector<TrialKey> trials;
  std::vector<SplitTag> split_labels;

  std::size_t count(SplitTag tag) const;
};

enum class ChannelPolicy { Red, Green, Blue, All };

// Row-major feature vector of the selected channel(s).
std::vector<double> flatten_image(const ImageFrame& frame,
                                  ChannelPolicy policy = ChannelPolicy::Green);
// Inverse of flatten_image for a known shape.
ImageFrame unflatten_image(std::span<const double> features, int height,
                           int width, int channels);

}  // namespace nailforce
