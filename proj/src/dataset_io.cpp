#include "nailforce/dataset_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "nailforce/util.hpp"

namespace fs = std::filesystem;

namespace nailforce::io {

namespace {

constexpr int kMaxVal = 65535;

std::ofstream open_out(const std::string& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path);
  out << std::setprecision(17);
  return out;
}

std::string frame_path(const std::string& dir, std::size_t i, int channels) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%06zu.%s", i, channels == 1 ? "pgm" : "ppm");
  return (fs::path(dir) / buf).string();
}

std::vector<int> read_states(const std::string& path) {
  const Table t = read_csv(path);
  std::vector<int> out;
  out.reserve(t.rows.size());
  for (const auto& r : t.rows) {
    if (r.size() < 2) throw Error(ErrorKind::Io, "malformed LED log " + path);
    out.push_back(static_cast<int>(r[1]));
  }
  return out;
}

void write_states(const std::string& path, const std::string& key, const std::vector<int>& s) {
  Table t{{key, "state"}, {}};
  for (std::size_t i = 0; i < s.size(); ++i) t.rows.push_back({static_cast<double>(i), double(s[i])});
  write_csv(path, t);
}

}  // namespace

void write_pnm(const std::string& path, const ImageFrame& frame) {
  if (frame.channels() != 1 && frame.channels() != 3) {
    throw Error(ErrorKind::InvalidInput, "write_pnm: need 1 or 3 channels");
  }
  auto out = open_out(path, true);
  out << (frame.channels() == 1 ? "P5" : "P6") << '\n'
      << frame.width() << ' ' << frame.height() << '\n'
      << kMaxVal << '\n';
  std::vector<unsigned char> buf;
  buf.reserve(frame.data().size() * 2);
  for (double v : frame.data()) {
    const auto q = static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * kMaxVal));
    buf.push_back(static_cast<unsigned char>(q >> 8));
    buf.push_back(static_cast<unsigned char>(q & 0xff));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed: " + path);
}

ImageFrame read_pnm(const std::string& path, double timestamp) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  if ((magic != "P5" && magic != "P6") || w <= 0 || h <= 0 || maxval <= 0 || maxval > kMaxVal) {
    throw Error(ErrorKind::Io, "unsupported PNM header in " + path);
  }
  const int channels = magic == "P5" ? 1 : 3;
  const std::size_t n = static_cast<std::size_t>(w) * h * channels;
  const int bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> buf(n * bytes);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw Error(ErrorKind::Io, "truncated PNM data in " + path);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned q = bytes == 2 ? (unsigned(buf[2 * i]) << 8) | buf[2 * i + 1] : buf[i];
    data[i] = static_cast<double>(q) / maxval;
  }
  return ImageFrame(h, w, channels, std::move(data), timestamp);
}

Table read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path);
  Table t;
  std::string line;
  if (!std::getline(in, line)) return t;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) t.header.push_back(cell);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw Error(ErrorKind::Io, "non-numeric cell '" + cell + "' in " + path);
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

void write_csv(const std::string& path, const Table& table) {
  auto out = open_out(path);
  for (std::size_t i = 0; i < table.header.size(); ++i) out << (i ? "," : "") << table.header[i];
  out << '\n';
  for (const auto& r : table.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed: " + path);
}

void write_trial(const std::string& dir, const Trial& trial) {
  trial.validate();
  fs::create_directories(dir);
  Table frames{{"frame", "timestamp"}, {}};
  for (std::size_t i = 0; i < trial.frames.size(); ++i) {
    write_pnm(frame_path(dir, i, trial.frames[i].channels()), trial.frames[i]);
    frames.rows.push_back({static_cast<double>(i), trial.frames[i].timestamp()});
  }
  write_csv((fs::path(dir) / "frames.csv").string(), frames);
  Table wr{{"timestamp", "fx", "fy", "fz", "tx", "ty", "tz"}, {}};
  for (const auto& w : trial.wrenches) {
    wr.rows.push_back({w.timestamp, w.f[0], w.f[1], w.f[2], w.tau[0], w.tau[1], w.tau[2]});
  }
  write_csv((fs::path(dir) / "wrench.csv").string(), wr);
  write_states((fs::path(dir) / "led_video.csv").string(), "frame", trial.led_video);
  write_states((fs::path(dir) / "led_force.csv").string(), "sample", trial.led_force);
  Table mk{{"frame", "theta_deg"}, {}};
  for (std::size_t i = 0; i < trial.marker_angle_deg.size(); ++i) {
    mk.rows.push_back({static_cast<double>(i), trial.marker_angle_deg[i]});
  }
  write_csv((fs::path(dir) / "marker.csv").string(), mk);

  KeyValueConfig meta;
  auto num = [](double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
  };
  meta.set("name", trial.name);
  meta.set("participant", std::to_string(trial.participant));
  meta.set("session", std::to_string(trial.session));
  meta.set("repetition", std::to_string(trial.repetition));
  meta.set("finger", std::string(to_string(trial.finger)));
  meta.set("weight_g", std::to_string(trial.weight_g));
  meta.set("surface_id", std::to_string(trial.surface.id));
  meta.set("c1", num(trial.surface.c1));
  meta.set("c2", num(trial.surface.c2));
  meta.set("theta_r_deg", num(trial.reference_marker_angle_deg));
  auto out = open_out((fs::path(dir) / "meta").string());
  out << meta.to_text();
}

Trial read_trial(const std::string& dir) {
  const KeyValueConfig meta = KeyValueConfig::load((fs::path(dir) / "meta").string());
  Trial t;
  t.name = meta.get("name", fs::path(dir).filename().string());
  t.participant = meta.get("participant", 1);
  t.session = meta.get("session", 0);
  t.repetition = meta.get("repetition", 0);
  t.finger = finger_from_string(meta.get("finger", std::string("index")));
  t.weight_g = meta.get("weight_g", 0);
  const int surface_id = meta.get("surface_id", 0);
  t.surface = t.finger == Finger::Thumb && surface_id == 0 ? thumb_surface() : surface_by_id(surface_id);
  t.reference_marker_angle_deg = meta.get("theta_r_deg", 0.0);

  const Table frames = read_csv((fs::path(dir) / "frames.csv").string());
  for (const auto& r : frames.rows) {
    const auto i = static_cast<std::size_t>(r.at(0));
    std::string p = frame_path(dir, i, 3);
    if (!fs::exists(p)) p = frame_path(dir, i, 1);
    t.frames.push_back(read_pnm(p, r.at(1)));
  }
  const Table wr = read_csv((fs::path(dir) / "wrench.csv").string());
  for (const auto& r : wr.rows) {
    if (r.size() < 7) throw Error(ErrorKind::Io, "malformed wrench.csv in " + dir);
    t.wrenches.push_back({{r[1], r[2], r[3]}, {r[4], r[5], r[6]}, r[0]});
  }
  t.led_video = read_states((fs::path(dir) / "led_video.csv").string());
  t.led_force = read_states((fs::path(dir) / "led_force.csv").string());
  const Table mk = read_csv((fs::path(dir) / "marker.csv").string());
  for (const auto& r : mk.rows) t.marker_angle_deg.push_back(r.at(1));
  t.validate();
  return t;
}

std::vector<std::string> list_trials(const std::string& root) {
  std::vector<std::string> out;
  if (!fs::is_directory(root)) throw Error(ErrorKind::Io, "not a directory: " + root);
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "meta")) out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace nailforce::io
