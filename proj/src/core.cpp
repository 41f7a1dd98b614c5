#include "nailforce/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nailforce {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidInput: return "invalid-input";
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
    case ErrorKind::NoSignal: return "no-signal";
    case ErrorKind::CannotCenter: return "cannot-center";
    case ErrorKind::IllConditioned: return "ill-conditioned";
    case ErrorKind::NoConsistentContact: return "no-consistent-contact";
    case ErrorKind::Numerical: return "numerical";
    case ErrorKind::AlignmentFailed: return "alignment-failed";
    case ErrorKind::TrainingFailed: return "training-failed";
    case ErrorKind::SchemeInfeasible: return "scheme-infeasible";
  }
  return "unknown";
}

ImageFrame::ImageFrame(int height, int width, int channels, double timestamp)
    : height_(height), width_(width), channels_(channels), timestamp_(timestamp) {
  if (height < 0 || width < 0 || (channels != 1 && channels != 3)) {
    throw Error(ErrorKind::InvalidInput, "ImageFrame: bad shape");
  }
  data_.assign(static_cast<std::size_t>(height) * width * channels, 0.0);
}

ImageFrame::ImageFrame(int height, int width, int channels,
                       std::vector<double> data, double timestamp)
    : height_(height),
      width_(width),
      channels_(channels),
      data_(std::move(data)),
      timestamp_(timestamp) {
  if (height < 0 || width < 0 || (channels != 1 && channels != 3)) {
    throw Error(ErrorKind::InvalidInput, "ImageFrame: bad shape");
  }
  if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw Error(ErrorKind::InvalidInput,
                "ImageFrame: data length != height*width*channels");
  }
  for (double v : data_) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw Error(ErrorKind::InvalidInput, "ImageFrame: intensity outside [0,1]");
    }
  }
}

ImageFrame ImageFrame::channel(int ch) const {
  if (ch < 0 || ch >= channels_) {
    throw Error(ErrorKind::InvalidInput, "ImageFrame::channel: bad index");
  }
  ImageFrame out(height_, width_, 1, timestamp_);
  for (std::size_t i = 0; i < pixel_count(); ++i) {
    out.data_[i] = data_[i * channels_ + ch];
  }
  return out;
}

void ImageFrame::clamp_unit() {
  for (double& v : data_) v = std::clamp(v, 0.0, 1.0);
}

double SurfaceSpec::height(double x, double y) const {
  const double r = radius_mm;
  switch (shape) {
    case SurfaceShape::Flat:
      return 0.0;
    case SurfaceShape::Sphere: {
      const double q = std::max(r * r - x * x - y * y, 0.0);
      return std::sqrt(q) - r;
    }
    case SurfaceShape::Cylinder: {
      const double u = cylinder_axis == Axis::X ? y : x;
      return std::sqrt(std::max(r * r - u * u, 0.0)) - r;
    }
    case SurfaceShape::Prism:
      return -std::abs(y) * std::tan(prism_angle_deg * M_PI / 180.0);
  }
  return 0.0;
}

std::array<double, 2> SurfaceSpec::height_gradient(double x, double y) const {
  const double r = radius_mm;
  switch (shape) {
    case SurfaceShape::Flat:
      return {0.0, 0.0};
    case SurfaceShape::Sphere: {
      const double s = std::sqrt(std::max(r * r - x * x - y * y, 1e-12));
      return {-x / s, -y / s};
    }
    case SurfaceShape::Cylinder: {
      if (cylinder_axis == Axis::X) {
        const double s = std::sqrt(std::max(r * r - y * y, 1e-12));
        return {0.0, -y / s};
      }
      const double s = std::sqrt(std::max(r * r - x * x, 1e-12));
      return {-x / s, 0.0};
    }
    case SurfaceShape::Prism: {
      const double t = std::tan(prism_angle_deg * M_PI / 180.0);
      return {0.0, y > 0 ? -t : (y < 0 ? t : 0.0)};
    }
  }
  return {0.0, 0.0};
}

double SurfaceSpec::domain_limit() const {
  if (shape == SurfaceShape::Sphere || shape == SurfaceShape::Cylinder) {
    return radius_mm;
  }
  return std::numeric_limits<double>::infinity();
}

double radius_from_curvature(double c) { return c > 0.0 ? 1000.0 / c : 0.0; }

SurfaceSpec surface_by_id(int id) {
  SurfaceSpec s;
  s.id = id;
  auto sphere = [&](double c) {
    s.shape = SurfaceShape::Sphere;
    s.c1 = s.c2 = c;
    s.radius_mm = radius_from_curvature(c);
  };
  // Cylinder curved along x (axis along y) carries c1, curved along y carries c2.
  auto cylinder = [&](double c, Axis axis) {
    s.shape = SurfaceShape::Cylinder;
    s.cylinder_axis = axis;
    s.radius_mm = radius_from_curvature(c);
    if (axis == Axis::Y) {
      s.c1 = c;
    } else {
      s.c2 = c;
    }
  };
  switch (id) {
    case 1: sphere(12.5); break;
    case 2: sphere(25.0); break;
    case 3: sphere(50.0); break;
    case 4: sphere(100.0); break;
    case 5: cylinder(25.0, Axis::Y); break;
    case 6: cylinder(25.0, Axis::X); break;
    case 7: cylinder(100.0, Axis::Y); break;
    case 8: cylinder(100.0, Axis::X); break;
    case 9:
      s.shape = SurfaceShape::Prism;
      s.prism_angle_deg = 10.0;
      break;
    case 10:
      s.shape = SurfaceShape::Prism;
      s.prism_angle_deg = 20.0;
      break;
    case 11: break;
    case 12: s.material = Material::Silk; break;
    default:
      throw Error(ErrorKind::InvalidInput,
                  "surface id must be in 1..12, got " + std::to_string(id));
  }
  return s;
}

SurfaceSpec thumb_surface() {
  SurfaceSpec s = surface_by_id(11);
  s.id = 0;
  return s;
}

TargetVector TargetVector::from(const Wrench& w, double c1, double c2) {
  TargetVector t;
  t.values = {w.f[0], w.f[1], w.f[2], w.tau[0], w.tau[1], w.tau[2], c1, c2};
  return t;
}

std::vector<Component> validate_ranges(const TargetVector& t) {
  std::vector<Component> flags;
  for (std::size_t i = 0; i < kTargetDim; ++i) {
    const double v = t.values[i];
    if (!(v >= kTargetRanges[i].lo && v <= kTargetRanges[i].hi)) {
      flags.push_back(static_cast<Component>(i));
    }
  }
  return flags;
}

std::string_view to_string(Finger f) {
  return f == Finger::Index ? "index" : "thumb";
}

Finger finger_from_string(std::string_view s) {
  if (s == "index") return Finger::Index;
  if (s == "thumb") return Finger::Thumb;
  throw Error(ErrorKind::InvalidInput, "unknown finger '" + std::string(s) + "'");
}

bool is_valid_weight(int grams) {
  return grams == 165 || grams == 330 || grams == 660;
}

namespace {

double mean_rate(std::size_t n, double first, double last) {
  if (n < 2 || !(last > first)) return 0.0;
  return static_cast<double>(n - 1) / (last - first);
}

}  // namespace

double Trial::frame_rate() const {
  if (frames.empty()) return 0.0;
  return mean_rate(frames.size(), frames.front().timestamp(),
                   frames.back().timestamp());
}

double Trial::force_rate() const {
  if (wrenches.empty()) return 0.0;
  return mean_rate(wrenches.size(), wrenches.front().timestamp,
                   wrenches.back().timestamp);
}

void Trial::validate() const {
  if (!is_valid_weight(weight_g)) {
    throw Error(ErrorKind::InvalidInput,
                "trial weight must be 165, 330 or 660 g");
  }
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (!(frames[i].timestamp() > frames[i - 1].timestamp())) {
      throw Error(ErrorKind::InvalidInput,
                  "frame timestamps not strictly increasing");
    }
  }
  for (std::size_t i = 1; i < wrenches.size(); ++i) {
    if (!(wrenches[i].timestamp > wrenches[i - 1].timestamp)) {
      throw Error(ErrorKind::InvalidInput,
                  "wrench timestamps not strictly increasing");
    }
  }
  for (const auto& w : wrenches) {
    for (int k = 0; k < 3; ++k) {
      if (!std::isfinite(w.f[k]) || !std::isfinite(w.tau[k])) {
        throw Error(ErrorKind::InvalidInput, "non-finite wrench component");
      }
    }
  }
}

std::string_view to_string(SplitTag t) {
  switch (t) {
    case SplitTag::Train: return "train";
    case SplitTag::Validation: return "validation";
    case SplitTag::Test: return "test";
  }
  return "unknown";
}

std::size_t Dataset::count(SplitTag tag) const {
  return static_cast<std::size_t>(
      std::count(split_labels.begin(), split_labels.end(), tag));
}

std::vector<double> flatten_image(const ImageFrame& frame, ChannelPolicy policy) {
  if (frame.empty() || frame.height() == 0 || frame.width() == 0) {
    throw Error(ErrorKind::InvalidInput, "flatten_image: empty frame");
  }
  const int nc = frame.channels();
  if (policy == ChannelPolicy::All || nc == 1) {
    auto d = frame.data();
    return {d.begin(), d.end()};
  }
  const int ch = static_cast<int>(policy);
  std::vector<double> out(frame.pixel_count());
  auto d = frame.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i * nc + ch];
  return out;
}

ImageFrame unflatten_image(std::span<const double> features, int height,
                           int width, int channels) {
  return ImageFrame(height, width, channels,
                    std::vector<double>(features.begin(), features.end()));
}

}  // namespace nailforce
