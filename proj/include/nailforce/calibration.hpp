#pragma once

#include <functional>
#include <span>
#include <vector>

#include "nailforce/core.hpp"

namespace nailforce::calib {

struct ContactPoint {
  double x = 0.0;  // mm, sensor coordinates
  double y = 0.0;
  double z = 0.0;
};

struct CalibratedWrench {
  Vec3 f{};          // N, rotated
  Vec3 tau_prime{};  // N*mm, fingertip torque
  double timestamp = 0.0;
};

// Torque about the sensor origin produced by force f acting at p:
//   dtx = fz*y - fy*z, dty = -fz*x + fx*z, dtz = -fx*y + fy*x
Vec3 torque_shift(const Vec3& f, const ContactPoint& p);

struct ContactSolverOptions {
  double min_fz = 0.2;           // N
  double residual_tol = 1e-3;    // N*mm, on |torque_shift - dtau|
  int max_iterations = 100;
  int grid_points = 201;         // per axis, fallback search
  double grid_half_width = 15.0; // mm
};

// Point on z = h(x,y) whose moment of f matches dtau.
ContactPoint solve_contact(const Vec3& f, const Vec3& dtau, const SurfaceSpec& surface,
                           const ContactSolverOptions& opts = {});

// tau' = tau - torque_shift(f, contact) per sample; forces untouched.
std::vector<Wrench> calibrate_torques(std::span<const Wrench> wrenches,
                                      const ContactPoint& contact);

// Rotates (fx,fy) counter-clockwise (seen from +z) by theta - theta_r degrees.
Vec3 rotate_forces(const Vec3& f, double theta_deg, double theta_r_deg);

struct ContactWindowOptions {
  double onset_fz = 0.1;        // N
  double onset_sustain_s = 0.05;
  double min_force = 0.2;       // N, |f| for averaging
  int samples = 5;
};

struct EarlyContact {
  std::size_t onset_index = 0;
  Vec3 mean_force{};
  Vec3 mean_torque{};
};

// Onset = first sample with fz above threshold for the sustain window; the
// first K subsequent samples with |f| above min_force are averaged.
EarlyContact early_contact(std::span<const Wrench> wrenches, double force_rate,
                           const ContactWindowOptions& opts = {});

// Full torque calibration of a trial's wrench stream: contact from the early
// window, then tau' for every sample.
struct TorqueCalibration {
  ContactPoint contact;
  std::vector<Wrench> wrenches;  // tau replaced by tau'
};
TorqueCalibration calibrate_trial_torques(std::span<const Wrench> wrenches,
                                          double force_rate, const SurfaceSpec& surface,
                                          const ContactWindowOptions& window = {},
                                          const ContactSolverOptions& solver = {});

// Labeled (fx, fy) observations with model predictions for the angle scan.
struct AngleSample {
  double fx_truth = 0.0;
  double fy_truth = 0.0;
  double fx_pred = 0.0;
  double fy_pred = 0.0;
};

// Scans alpha in [lo, hi] degrees at 1 degree steps, rotating the truth by
// alpha; returns the alpha with minimal RMSE against the predictions. Ties go
// to the smallest |alpha|.
int marker_angle_search(std::span<const AngleSample> samples, int lo = -20, int hi = 20);

}  // namespace nailforce::calib
