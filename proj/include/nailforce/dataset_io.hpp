#pragma once

#include <string>
#include <vector>

#include "nailforce/core.hpp"

namespace nailforce::io {

// 16-bit binary PGM (1 channel) or PPM (3 channels).
void write_pnm(const std::string& path, const ImageFrame& frame);
ImageFrame read_pnm(const std::string& path, double timestamp = 0.0);

// Trial directory: frame_%06d.{pgm,ppm}, frames.csv (timestamps), wrench.csv,
// led_video.csv, led_force.csv, marker.csv and a key-value `meta` file.
void write_trial(const std::string& dir, const Trial& trial);
Trial read_trial(const std::string& dir);

// Sorted trial directories (those holding a `meta` file) below root.
std::vector<std::string> list_trials(const std::string& root);

// Plain numeric CSV with a header line.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};
Table read_csv(const std::string& path);
void write_csv(const std::string& path, const Table& table);

}  // namespace nailforce::io
