// nailforce command-line front end.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>

#include "CLI11.hpp"
#include "json.hpp"
#include "nailforce/alignment.hpp"
#include "nailforce/calibration.hpp"
#include "nailforce/dataset_io.hpp"
#include "nailforce/harness.hpp"
#include "nailforce/imaging.hpp"
#include "nailforce/postprocess.hpp"
#include "nailforce/sync.hpp"
#include "nailforce/synthgen.hpp"

namespace fs = std::filesystem;
using namespace nailforce;
using harness::StageError;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
};

struct ModelFlags {
  std::string predictor;
  std::string mode;
  std::optional<double> inducing_frac;
  std::optional<int> smooth_span;
};

KeyValueConfig load_config(const Globals& g, const ModelFlags* m = nullptr) {
  KeyValueConfig kv = g.config_path.empty() ? KeyValueConfig{} : KeyValueConfig::load(g.config_path);
  if (g.seed) kv.set("seed", std::to_string(*g.seed));
  if (g.jobs) kv.set("jobs", std::to_string(*g.jobs));
  if (m) {
    if (!m->mode.empty()) {
      if (m->mode != "exact" && m->mode != "fitc") throw Error(ErrorKind::Config, "--mode must be exact or fitc");
      kv.set("predictor", m->mode == "exact" ? "gp" : "fitc");
    }
    if (!m->predictor.empty()) {
      if (m->predictor == "gp" && m->mode == "fitc") {
        kv.set("predictor", "fitc");
      } else {
        kv.set("predictor", m->predictor);
      }
    }
    if (m->inducing_frac) kv.set("inducing_fraction", std::to_string(*m->inducing_frac));
    if (m->smooth_span) kv.set("smooth_span", std::to_string(*m->smooth_span));
  }
  return kv;
}

template <class F>
void stage(const std::string& name, F&& f) {
  try {
    f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e);
  }
}

Trial load_trial(const std::string& dir) {
  Trial t;
  stage("load", [&] { t = io::read_trial(dir); });
  return t;
}

void write_wrench_csv(const std::string& path, const std::vector<double>& times,
                      std::span<const Wrench> w) {
  io::Table t;
  t.header = {"index", "timestamp", "fx", "fy", "fz", "tx", "ty", "tz"};
  for (std::size_t i = 0; i < w.size(); ++i) {
    t.rows.push_back({static_cast<double>(i), times[i], w[i].f[0], w[i].f[1], w[i].f[2], w[i].tau[0],
                      w[i].tau[1], w[i].tau[2]});
  }
  io::write_csv(path, t);
}

// ------------------------------------------------------------- commands

int cmd_synth(const Globals& g, const std::string& out) {
  synth::GeneratorConfig c;
  stage("config", [&] { c = synth::GeneratorConfig::from(load_config(g)); c.validate(); });
  const int jobs = g.jobs.value_or(1);
  std::vector<std::string> dirs;
  stage("synth", [&] { dirs = synth::write_dataset(c, out, jobs); });
  std::cout << "wrote " << dirs.size() << " trials to " << out << "\n";
  return 0;
}

int cmd_sync(const std::string& trial_dir, const std::string& out) {
  Trial t = load_trial(trial_dir);
  sync::SyncResult r;
  stage("sync", [&] { r = sync::synchronize_trial(t); });
  fs::create_directories(out);
  std::ofstream o(fs::path(out) / "sync.txt");
  o << std::setprecision(17) << "offset_s = " << r.offset_s << "\nlag_samples = " << r.estimate.lag
    << "\nscore = " << r.estimate.score << "\n";
  std::vector<double> times;
  for (const auto& f : t.frames) times.push_back(f.timestamp());
  write_wrench_csv((fs::path(out) / "frame_labels.csv").string(), times, r.frame_labels);
  std::cout << "offset " << r.offset_s << " s (lag " << r.estimate.lag << ", score " << r.estimate.score << ")\n";
  return 0;
}

ImageFrame mask_weights(const imaging::Mask& m) {
  ImageFrame w(m.height(), m.width(), 1);
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) w.at(r, c) = m.at(r, c) ? 1.0 : 0.0;
  }
  return w;
}

int cmd_track(const Globals& g, const std::string& trial_dir, const std::string& out) {
  const Trial t = load_trial(trial_dir);
  harness::PipelineConfig pc;
  stage("config", [&] { pc = harness::PipelineConfig::from(load_config(g)); });
  io::Table table;
  table.header = {"frame", "timestamp", "row", "col", "win_height", "win_width", "iterations", "lost"};
  stage("track", [&] {
    if (t.frames.empty()) throw Error(ErrorKind::InvalidInput, "trial has no frames");
    const imaging::Mask first = imaging::segment_nail(t.frames[0], pc.segmentation);
    if (first.empty()) throw Error(ErrorKind::CannotCenter, "nail not found in frame 0");
    const auto cen = first.centroid();
    const int side = 2 * static_cast<int>(std::lround(std::sqrt(first.count() / std::numbers::pi))) + 1;
    imaging::TrackState s{cen[0], cen[1], side, side};
    for (std::size_t i = 0; i < t.frames.size(); ++i) {
      const imaging::Mask m = imaging::segment_nail(t.frames[i], pc.segmentation);
      const imaging::TrackResult r = imaging::mean_shift_track(mask_weights(m), s);
      if (!r.lost) s = r.state;
      table.rows.push_back({static_cast<double>(i), t.frames[i].timestamp(), s.row, s.col,
                            static_cast<double>(s.win_height), static_cast<double>(s.win_width),
                            static_cast<double>(r.iterations), r.lost ? 1.0 : 0.0});
    }
  });
  io::write_csv(out, table);
  std::cout << "tracked " << table.rows.size() << " frames\n";
  return 0;
}

int cmd_align(const Globals& g, const std::string& trial_dir, const std::string& out, int ref) {
  Trial t = load_trial(trial_dir);
  harness::PipelineConfig pc;
  stage("config", [&] { pc = harness::PipelineConfig::from(load_config(g)); });
  ImageFrame reference;
  if (ref >= 0) {
    if (static_cast<std::size_t>(ref) >= t.frames.size()) {
      throw StageError("align", Error(ErrorKind::InvalidInput, "--ref beyond the last frame"));
    }
    stage("track", [&] { reference = harness::canonical_frame(t.frames[static_cast<std::size_t>(ref)], pc); });
  } else {
    reference = harness::reference_frame(t, pc);
  }
  fs::create_directories(out);
  io::Table trace;
  trace.header = {"frame", "iteration", "level", "energy"};
  std::vector<align::AlignmentResult> results(t.frames.size());
  stage("align", [&] {
    parallel_for(t.frames.size(), g.jobs.value_or(1), [&](std::size_t i) {
      const ImageFrame canon = harness::canonical_frame(t.frames[i], pc);
      results[i] = align::align(reference, canon, pc.alignment);
    });
  });
  for (std::size_t i = 0; i < results.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "aligned_%04zu.pnm", i);
    io::write_pnm((fs::path(out) / name).string(), results[i].aligned);
    for (std::size_t k = 0; k < results[i].energy_trace.size(); ++k) {
      trace.rows.push_back({static_cast<double>(i), static_cast<double>(k),
                            static_cast<double>(results[i].trace_level[k]), results[i].energy_trace[k]});
    }
  }
  io::write_csv((fs::path(out) / "energy.csv").string(), trace);
  std::cout << "aligned " << results.size() << " frames\n";
  return 0;
}

int cmd_calibrate(const std::string& trial_dir, const std::string& out) {
  const Trial t = load_trial(trial_dir);
  calib::TorqueCalibration cal;
  stage("calibrate", [&] { cal = calib::calibrate_trial_torques(t.wrenches, t.force_rate(), t.surface); });
  fs::create_directories(out);
  std::vector<double> times;
  for (const auto& w : cal.wrenches) times.push_back(w.timestamp);
  write_wrench_csv((fs::path(out) / "calibrated.csv").string(), times, cal.wrenches);
  std::ofstream o(fs::path(out) / "contact.txt");
  o << std::setprecision(17) << "contact_x = " << cal.contact.x << "\ncontact_y = " << cal.contact.y
    << "\ncontact_z = " << cal.contact.z << "\n";
  std::cout << "contact (" << cal.contact.x << ", " << cal.contact.y << ", " << cal.contact.z << ") mm\n";
  return 0;
}

// Trials of a dataset directory with split tags from the configured scheme.
struct TaggedTrials {
  std::vector<std::string> dirs;
  std::vector<SplitTag> tags;
};

TaggedTrials tag_dataset(const std::string& root, const harness::PipelineConfig& pc) {
  TaggedTrials out;
  out.dirs = io::list_trials(root);
  if (out.dirs.empty()) throw StageError("load", Error(ErrorKind::Io, "no trials under " + root));
  std::vector<TrialKey> keys;
  for (const auto& d : out.dirs) {
    const KeyValueConfig m = KeyValueConfig::load((fs::path(d) / "meta").string());
    keys.push_back({m.get("participant", 1), m.get("session", 0), m.get("weight_g", 165),
                    m.get("surface_id", 1), m.get("repetition", 0)});
  }
  Rng rng = derive_rng(pc.seed, 0x5B11);
  stage("split", [&] { out.tags = harness::make_splits(keys, pc.scheme, rng); });
  return out;
}

std::vector<harness::ProcessedTrial> process_all(const std::vector<std::string>& dirs,
                                                 const ImageFrame& reference,
                                                 const harness::PipelineConfig& pc, int stride) {
  std::vector<harness::ProcessedTrial> out(dirs.size());
  parallel_for(dirs.size(), pc.jobs, [&](std::size_t i) {
    out[i] = harness::process_trial(load_trial(dirs[i]), reference, pc, stride);
  });
  return out;
}

std::vector<const harness::ProcessedTrial*> pointers(const std::vector<harness::ProcessedTrial>& v) {
  std::vector<const harness::ProcessedTrial*> p;
  for (const auto& t : v) p.push_back(&t);
  return p;
}

std::string reference_path(const std::string& model) { return model + ".ref.pnm"; }

int cmd_train(const Globals& g, const ModelFlags& mf, const std::string& dataset,
              const std::string& model_path, bool all) {
  harness::PipelineConfig pc;
  stage("config", [&] { pc = harness::PipelineConfig::from(load_config(g, &mf)); });
  const TaggedTrials tt = tag_dataset(dataset, pc);
  std::vector<std::string> train_dirs, val_dirs;
  for (std::size_t i = 0; i < tt.dirs.size(); ++i) {
    if (tt.tags[i] == SplitTag::Train || (all && tt.tags[i] == SplitTag::Test)) train_dirs.push_back(tt.dirs[i]);
    if (tt.tags[i] == SplitTag::Validation) val_dirs.push_back(tt.dirs[i]);
  }
  const ImageFrame reference = harness::reference_frame(load_trial(train_dirs.front()), pc);
  const auto train = process_all(train_dirs, reference, pc, pc.frame_stride);
  const auto val = process_all(val_dirs, reference, pc, pc.frame_stride);
  const harness::SampleSet ts = harness::make_samples(pointers(train), reference.height(), reference.width());
  const harness::SampleSet vs = harness::make_samples(pointers(val), reference.height(), reference.width());
  harness::PredictorConfig cfg = pc.predictor;
  cfg.jobs = pc.jobs;
  cfg.seed = pc.seed;
  auto model = harness::make_predictor(cfg);
  stage("train", [&] {
    model->fit(ts, vs.size() ? &vs : nullptr);
    harness::save_model(model_path, *model);
    io::write_pnm(reference_path(model_path), reference);
  });
  if (harness::is_neural(cfg.kind)) {
    const auto h = nlohmann::json::parse(model->header_json());
    const auto& tr = h.at("trace");
    io::Table curve;
    curve.header = {"epoch", "train_loss", "validation_loss"};
    const auto tl = tr.at("train_loss").get<std::vector<double>>();
    const auto vl = tr.at("validation_loss").get<std::vector<double>>();
    for (std::size_t e = 0; e < tl.size(); ++e) {
      curve.rows.push_back({static_cast<double>(e), tl[e], e < vl.size() ? vl[e] : std::nan("")});
    }
    io::write_csv(model_path + ".curve.csv", curve);
  }
  std::cout << "trained " << harness::to_string(cfg.kind) << " on " << ts.size() << " samples from "
            << train_dirs.size() << " trials -> " << model_path << "\n";
  return 0;
}

// Model outputs for processed trials, smoothed per trial when span > 1.
harness::PredictionSet predict_trials(const harness::Predictor& model,
                                      const std::vector<harness::ProcessedTrial>& trials, int h, int w,
                                      int span) {
  harness::PredictionSet out;
  for (const auto& t : trials) {
    const std::vector<const harness::ProcessedTrial*> one{&t};
    const harness::SampleSet s = harness::make_samples(one, h, w);
    harness::ModelOutput o;
    stage("predict", [&] { o = model.predict(s); });
    const auto n = static_cast<Eigen::Index>(s.size());
    std::vector<TargetVector> pred(s.size()), sd(s.size());
    for (std::size_t k = 0; k < kTargetDim; ++k) {
      std::vector<double> series(s.size());
      for (Eigen::Index i = 0; i < n; ++i) series[static_cast<std::size_t>(i)] = o.mean(i, static_cast<Eigen::Index>(k));
      if (span > 1 && series.size() >= 4) {
        post::SmootherConfig sc;
        sc.span = span;
        stage("smooth", [&] { series = post::smooth(series, sc); });
      }
      for (Eigen::Index i = 0; i < n; ++i) {
        pred[static_cast<std::size_t>(i)][k] = series[static_cast<std::size_t>(i)];
        sd[static_cast<std::size_t>(i)][k] = o.std(i, static_cast<Eigen::Index>(k));
      }
    }
    out.truth.insert(out.truth.end(), t.labels.begin(), t.labels.end());
    out.pred.insert(out.pred.end(), pred.begin(), pred.end());
    out.std.insert(out.std.end(), sd.begin(), sd.end());
  }
  return out;
}

void write_predictions(const std::string& path, const harness::PredictionSet& p) {
  io::Table t;
  t.header = {"sample"};
  for (auto prefix : {"true_", "pred_", "std_"}) {
    for (auto n : kComponentNames) t.header.push_back(prefix + std::string(n));
  }
  for (std::size_t i = 0; i < p.truth.size(); ++i) {
    std::vector<double> row{static_cast<double>(i)};
    for (const auto* v : {&p.truth, &p.pred, &p.std}) {
      for (std::size_t k = 0; k < kTargetDim; ++k) row.push_back((*v)[i][k]);
    }
    t.rows.push_back(std::move(row));
  }
  io::write_csv(path, t);
}

std::unique_ptr<harness::Predictor> open_model(const std::string& path, ImageFrame& reference) {
  std::unique_ptr<harness::Predictor> m;
  stage("predict", [&] {
    m = harness::load_model(path);
    reference = io::read_pnm(reference_path(path));
  });
  return m;
}

int cmd_predict(const Globals& g, const ModelFlags& mf, const std::string& model_path,
                const std::vector<std::string>& trials, const std::string& out) {
  harness::PipelineConfig pc;
  stage("config", [&] { pc = harness::PipelineConfig::from(load_config(g, &mf)); });
  ImageFrame reference;
  const auto model = open_model(model_path, reference);
  const auto processed = process_all(trials, reference, pc, pc.test_frame_stride);
  const auto p = predict_trials(*model, processed, reference.height(), reference.width(), pc.smooth_span);
  write_predictions(out, p);
  std::cout << "predicted " << p.pred.size() << " frames -> " << out << "\n";
  return 0;
}

int cmd_eval(const Globals& g, const ModelFlags& mf, const std::string& model_path,
             const std::string& dataset, const std::string& out, bool all) {
  harness::PipelineConfig pc;
  stage("config", [&] { pc = harness::PipelineConfig::from(load_config(g, &mf)); });
  const TaggedTrials tt = tag_dataset(dataset, pc);
  std::vector<std::string> dirs;
  for (std::size_t i = 0; i < tt.dirs.size(); ++i) {
    if (all || tt.tags[i] == SplitTag::Test) dirs.push_back(tt.dirs[i]);
  }
  ImageFrame reference;
  const auto model = open_model(model_path, reference);
  const auto processed = process_all(dirs, reference, pc, pc.test_frame_stride);
  const auto p = predict_trials(*model, processed, reference.height(), reference.width(), pc.smooth_span);
  harness::EvalReport r;
  stage("eval", [&] {
    r = harness::evaluate(p, std::string(harness::to_string(model->kind())),
                          std::string(harness::to_string(pc.scheme.kind)));
  });
  fs::create_directories(out);
  std::ofstream(fs::path(out) / "report.json") << r.to_json() << "\n";
  std::ofstream(fs::path(out) / "report.csv") << r.to_csv();
  write_predictions((fs::path(out) / "predictions.csv").string(), p);
  std::cout << r.summary();
  return 0;
}

int cmd_pipeline(const Globals& g, const ModelFlags& mf, const std::string& dataset, const std::string& out) {
  KeyValueConfig kv;
  harness::PipelineConfig pc;
  stage("config", [&] {
    kv = load_config(g, &mf);
    if (!dataset.empty()) kv.set("dataset_dir", dataset);
    if (!out.empty()) kv.set("work_dir", out);
    pc = harness::PipelineConfig::from(kv);
  });
  const harness::PipelineResult r = harness::run_pipeline(pc);
  std::cout << r.report.summary();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fingertip force estimation from fingernail images"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "random seed (overrides config)");
  app.add_option("--jobs", g.jobs, "worker threads (overrides config)")->check(CLI::PositiveNumber);

  ModelFlags mf;
  auto model_flags = [&](CLI::App* sub, bool training) {
    if (training) {
      sub->add_option("--predictor", mf.predictor, "gp|fitc|cnn|nnfd|rnnfd")
          ->check(CLI::IsMember({"gp", "fitc", "cnn", "nnfd", "rnnfd"}));
      sub->add_option("--mode", mf.mode, "GP mode")->check(CLI::IsMember({"exact", "fitc"}));
      sub->add_option("--inducing-frac", mf.inducing_frac, "FITC inducing fraction")->check(CLI::Range(0.0, 1.0));
    }
    sub->add_option("--smooth-span", mf.smooth_span, "odd LOESS span in frames, 1 disables");
  };

  std::string out, trial, model, dataset;
  std::vector<std::string> trials;
  int ref = -1;
  bool all = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--out", out, "dataset directory")->required();

  auto* sync = app.add_subcommand("sync", "recover the camera offset and per-frame labels");
  sync->add_option("trial", trial, "trial directory")->required()->check(CLI::ExistingDirectory);
  sync->add_option("--out", out, "output directory")->required();

  auto* track = app.add_subcommand("track", "mean-shift nail tracking");
  track->add_option("trial", trial, "trial directory")->required()->check(CLI::ExistingDirectory);
  track->add_option("--out", out, "TrackState CSV")->required();

  auto* alignc = app.add_subcommand("align", "non-rigid alignment against a reference frame");
  alignc->add_option("trial", trial, "trial directory")->required()->check(CLI::ExistingDirectory);
  alignc->add_option("--out", out, "output directory")->required();
  alignc->add_option("--ref", ref, "reference frame index (default: first low-force frame)");

  auto* calibrate = app.add_subcommand("calibrate", "contact point and fingertip torques");
  calibrate->add_option("trial", trial, "trial directory")->required()->check(CLI::ExistingDirectory);
  calibrate->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "fit a predictor on a dataset");
  train->add_option("--dataset", dataset, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", out, "model file")->required();
  train->add_flag("--all", all, "train on every trial, ignoring the test split");
  model_flags(train, true);

  auto* predict = app.add_subcommand("predict", "apply a trained model to trials");
  predict->add_option("--model", model, "model file")->required()->check(CLI::ExistingFile);
  predict->add_option("trials", trials, "trial directories")->required();
  predict->add_option("--out", out, "prediction CSV")->required();
  model_flags(predict, false);

  auto* eval = app.add_subcommand("eval", "evaluate a trained model on the test split");
  eval->add_option("--model", model, "model file")->required()->check(CLI::ExistingFile);
  eval->add_option("--dataset", dataset, "dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out", out, "report directory")->required();
  eval->add_flag("--all", all, "evaluate on every trial");
  model_flags(eval, false);

  auto* pipeline = app.add_subcommand("pipeline", "end-to-end split, train and evaluate");
  pipeline->add_option("--dataset", dataset, "dataset directory (default: generate in memory)");
  pipeline->add_option("--out", out, "work directory for artifacts");
  model_flags(pipeline, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(g, out);
    if (*sync) return cmd_sync(trial, out);
    if (*track) return cmd_track(g, trial, out);
    if (*alignc) return cmd_align(g, trial, out, ref);
    if (*calibrate) return cmd_calibrate(trial, out);
    if (*train) return cmd_train(g, mf, dataset, out, all);
    if (*predict) return cmd_predict(g, mf, model, trials, out);
    if (*eval) return cmd_eval(g, mf, model, dataset, out, all);
    if (*pipeline) return cmd_pipeline(g, mf, dataset, out);
  } catch (const StageError& e) {
    std::cerr << "error [" << e.stage() << "]: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error [" << app.get_subcommands().front()->get_name() << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error [" << app.get_subcommands().front()->get_name() << "]: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
