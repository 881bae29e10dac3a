#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "datapipe.hpp"
#include "errors.hpp"
#include "haar.hpp"
#include "metrics.hpp"
#include "net.hpp"
#include "solver.hpp"
#include "tensor.hpp"

namespace emorec {

// ---------------------------------------------------------------------------
// Run configuration (flat key=value file)
// ---------------------------------------------------------------------------

struct RunConfig {
  std::string network = "emex";  // emex | alexnet-mini
  int input_size = 32;
  std::vector<std::string> classes;
  std::string positive_class;  // empty: report micro-F1
  std::string dataset_dir;
  int train_per_class = 0;  // per-class counts; the remainder of each class is test
  int val_per_class = 0;
  std::string face_cascade;
  std::string mouth_cascade;
  double scale_factor = 1.1;
  int min_neighbors = 3;
  int min_size = 0;
  double group_eps = 0.2;
  std::string out_dir;
  double width_scale = 0.25;
  SolverConfig solver;
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

inline int parse_int(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const int v = std::stoi(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ParamError("config: bad integer for '" + key + "': '" + value + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ParamError("config: bad number for '" + key + "': '" + value + "'");
  }
}

inline uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ParamError("config: bad integer for '" + key + "': '" + value + "'");
  }
}

}  // namespace detail

/// Lines are `key=value`; blank lines and `#` comments are skipped, unknown
/// keys rejected. Later assignments override earlier ones.
inline RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ParamError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    if (key == "network") {
      if (value != "emex" && value != "alexnet-mini")
        throw ParamError("config: unknown network '" + value + "'");
      cfg.network = value;
    } else if (key == "input_size") {
      cfg.input_size = detail::parse_int(key, value);
    } else if (key == "classes") {
      cfg.classes.clear();
      for (const std::string& c : detail::split_csv_line(value)) {
        const std::string name = detail::trim(c);
        if (!name.empty()) cfg.classes.push_back(name);
      }
      if (cfg.classes.empty()) throw ParamError("config: empty class list");
    } else if (key == "positive_class") {
      cfg.positive_class = value;
    } else if (key == "dataset_dir") {
      cfg.dataset_dir = value;
    } else if (key == "train_per_class") {
      cfg.train_per_class = detail::parse_int(key, value);
    } else if (key == "val_per_class") {
      cfg.val_per_class = detail::parse_int(key, value);
    } else if (key == "face_cascade") {
      cfg.face_cascade = value;
    } else if (key == "mouth_cascade") {
      cfg.mouth_cascade = value;
    } else if (key == "scale_factor") {
      cfg.scale_factor = detail::parse_double(key, value);
    } else if (key == "min_neighbors") {
      cfg.min_neighbors = detail::parse_int(key, value);
    } else if (key == "min_size") {
      cfg.min_size = detail::parse_int(key, value);
    } else if (key == "group_eps") {
      cfg.group_eps = detail::parse_double(key, value);
    } else if (key == "out_dir") {
      cfg.out_dir = value;
    } else if (key == "width_scale") {
      cfg.width_scale = detail::parse_double(key, value);
    } else if (key == "train_batch_size") {
      cfg.solver.train_batch_size = detail::parse_int(key, value);
    } else if (key == "test_batch_size") {
      cfg.solver.test_batch_size = detail::parse_int(key, value);
    } else if (key == "test_iterations") {
      cfg.solver.test_iterations = detail::parse_int(key, value);
    } else if (key == "test_interval") {
      cfg.solver.test_interval = detail::parse_int(key, value);
    } else if (key == "max_iterations") {
      cfg.solver.max_iterations = detail::parse_int(key, value);
    } else if (key == "seed") {
      cfg.solver.seed = detail::parse_u64(key, value);
    } else if (key == "learning_rate") {
      cfg.solver.learning_rate = detail::parse_double(key, value);
    } else if (key == "beta1") {
      cfg.solver.beta1 = detail::parse_double(key, value);
    } else if (key == "beta2") {
      cfg.solver.beta2 = detail::parse_double(key, value);
    } else if (key == "epsilon") {
      cfg.solver.epsilon = detail::parse_double(key, value);
    } else {
      throw ParamError("config: unknown key '" + key + "'");
    }
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParamError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_run_config(buf.str());
}

inline NetworkSpec network_from_config(const RunConfig& cfg) {
  if (cfg.classes.size() < 2) throw ParamError("config: need at least 2 classes");
  const int k = static_cast<int>(cfg.classes.size());
  if (cfg.network == "emex") return build_emex(1, cfg.input_size, cfg.input_size, k);
  return build_alexnet_mini(1, cfg.input_size, cfg.input_size, k, cfg.width_scale);
}

/// -1 when no positive class is configured.
inline int positive_index_of(const RunConfig& cfg, const LabelMap& labels) {
  if (cfg.positive_class.empty()) return -1;
  const int idx = labels.index_of(cfg.positive_class);
  if (idx < 0)
    throw ParamError("config: positive_class '" + cfg.positive_class + "' is not in classes");
  return idx;
}

inline DetectParams detect_params_of(const RunConfig& cfg) {
  DetectParams p;
  p.scale_factor = cfg.scale_factor;
  p.min_neighbors = cfg.min_neighbors;
  p.min_size = cfg.min_size;
  p.eps = cfg.group_eps;
  return p;
}

// ---------------------------------------------------------------------------
// Subcommands. Each returns a process exit code: 0 success, 1 domain
// failure, 2 usage or IO error; run_guarded applies that mapping to thrown
// errors.
// ---------------------------------------------------------------------------

template <typename Fn>
inline int run_guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

inline int cmd_detect(const std::vector<std::string>& images, const std::string& cascade_path,
                      const DetectParams& params, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&]() {
    const Cascade cascade = import_cascade_file(cascade_path);
    out << "file,x,y,w,h,neighbors\n";
    for (const std::string& path : images) {
      const Tensor gray = load_pgm_file(path);
      const int min_size = params.min_size > 0 ? params.min_size
                                               : std::min(cascade.base_width, cascade.base_height);
      const std::vector<DetectionBox> hits = detect_multiscale(
          cascade, gray, params.scale_factor, params.min_neighbors, min_size, params.eps);
      for (const DetectionBox& d : hits)
        out << path << "," << d.x << "," << d.y << "," << d.w << "," << d.h << "," << d.neighbors
            << "\n";
    }
    return 0;
  });
}

/// Picks the strongest face per image (most neighbors, ties to the first in
/// (y,x,w) order), crops the mouth ROI and writes it next to a manifest in
/// out_dir. Zero faces across a non-empty input directory is a domain
/// failure (exit 1); the manifest is still written.
inline int cmd_extract(const std::string& image_dir, const std::string& face_cascade_path,
                       const std::string& mouth_cascade_path, const DetectParams& params,
                       const std::string& out_dir, std::ostream& err) {
  return run_guarded(err, [&]() {
    namespace fs = std::filesystem;
    const Cascade face_cascade = import_cascade_file(face_cascade_path);
    const Cascade mouth_cascade = import_cascade_file(mouth_cascade_path);
    if (!fs::is_directory(image_dir))
      throw ParamError("extract: '" + image_dir + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(image_dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".pgm")
        files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw ParamError("extract: cannot create '" + out_dir + "': " + ec.message());
    std::ofstream manifest(fs::path(out_dir) / "manifest.csv", std::ios::binary | std::ios::trunc);
    if (!manifest) throw ParamError("extract: cannot write manifest in '" + out_dir + "'");
    manifest << "file,face_x,face_y,face_w,face_h,mouth_x,mouth_y,mouth_w,mouth_h,fallback,out\n";
    size_t faces_found = 0;
    for (const fs::path& file : files) {
      const Tensor gray = load_pgm_file(file.string());
      const int min_size = params.min_size > 0
                               ? params.min_size
                               : std::min(face_cascade.base_width, face_cascade.base_height);
      const std::vector<DetectionBox> hits = detect_multiscale(
          face_cascade, gray, params.scale_factor, params.min_neighbors, min_size, params.eps);
      DetectionBox face{0, 0, 0, 0, -1};
      for (const DetectionBox& d : hits)
        if (d.neighbors > face.neighbors) face = d;
      if (face.neighbors < 0) continue;
      ++faces_found;
      DetectionBox roi;
      bool fallback = false;
      const Tensor mouth = extract_mouth_roi(gray, face, mouth_cascade, params, &roi, &fallback);
      const std::string out_name = file.stem().string() + "_mouth.pgm";
      write_pgm_file(mouth, (fs::path(out_dir) / out_name).string());
      manifest << file.string() << "," << face.x << "," << face.y << "," << face.w << ","
               << face.h << "," << roi.x << "," << roi.y << "," << roi.w << "," << roi.h << ","
               << (fallback ? 1 : 0) << "," << out_name << "\n";
    }
    manifest.flush();
    if (!manifest) throw ParamError("extract: manifest write failed");
    if (!files.empty() && faces_found == 0) {
      err << "error: no faces found in '" << image_dir << "'\n";
      return 1;
    }
    return 0;
  });
}

inline int cmd_split(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&]() {
    if (cfg.dataset_dir.empty()) throw ParamError("split: config must set dataset_dir");
    const LabelMap labels = LabelMap::from_names(cfg.classes);
    const std::vector<Sample> samples = load_dataset(cfg.dataset_dir, labels);
    SplitPlan plan;
    plan.train_per_class = cfg.train_per_class;
    plan.val_per_class = cfg.val_per_class;
    SeededRng rng(cfg.solver.seed);
    const SplitResult split = split_dataset(samples, plan, rng);
    out << "source_id,class,split\n";
    auto emit = [&](const std::vector<Sample>& part, const char* tag) {
      for (const Sample& s : part)
        out << s.source_id << "," << labels.name_of(s.label) << "," << tag << "\n";
    };
    emit(split.train, "train");
    emit(split.validation, "validation");
    emit(split.test, "test");
    return 0;
  });
}

/// Protocol: load, preprocess, split, init, train. One seeded generator
/// drives split, weight init, epoch shuffles and dropout in that order, so a
/// config determines every artifact byte. Writes ckpt_*.bin and
/// trainlog.csv into out_dir.
inline int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&]() {
    if (cfg.dataset_dir.empty()) throw ParamError("train: config must set dataset_dir");
    if (cfg.out_dir.empty()) throw ParamError("train: config must set out_dir");
    const LabelMap labels = LabelMap::from_names(cfg.classes);
    const int positive = positive_index_of(cfg, labels);
    const NetworkSpec spec = network_from_config(cfg);
    const std::vector<Sample> raw = load_dataset(cfg.dataset_dir, labels);
    const std::vector<Sample> samples = preprocess_samples(raw, cfg.input_size);
    SplitPlan plan;
    plan.train_per_class = cfg.train_per_class;
    plan.val_per_class = cfg.val_per_class;
    SeededRng rng(cfg.solver.seed);
    const SplitResult split = split_dataset(samples, plan, rng);
    NetworkState state = init_state(spec, rng);
    std::filesystem::create_directories(cfg.out_dir);
    const std::vector<TrainLogRow> log =
        train(spec, state, split.train, split.validation, cfg.solver, rng, cfg.out_dir, positive);
    write_train_log_csv(log, (std::filesystem::path(cfg.out_dir) / "trainlog.csv").string());
    out << "step,accuracy,f1\n";
    for (const TrainLogRow& r : log)
      out << r.step << "," << detail::fixed4(r.val_accuracy) << "," << detail::fixed4(r.val_f1)
          << "\n";
    return 0;
  });
}

/// Evaluates a checkpoint on a whole dataset directory (no splitting): the
/// cross-domain protocol is this command pointed at a foreign dataset.
inline int cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path,
                    const std::string& dataset_dir, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&]() {
    const std::string dir = dataset_dir.empty() ? cfg.dataset_dir : dataset_dir;
    if (dir.empty()) throw ParamError("eval: no dataset directory given");
    const LabelMap labels = LabelMap::from_names(cfg.classes);
    const int positive = positive_index_of(cfg, labels);
    const NetworkSpec spec = network_from_config(cfg);
    const Checkpoint ck = load_checkpoint(checkpoint_path, spec);
    const std::vector<Sample> raw = load_dataset(dir, labels);
    const std::vector<Sample> samples = preprocess_samples(raw, cfg.input_size);
    const EvalResult result = evaluate(spec, ck.state, samples, positive);
    out << "step,accuracy,f1\n";
    out << ck.step << "," << detail::fixed4(result.accuracy) << "," << detail::fixed4(result.f1)
        << "\n";
    return 0;
  });
}

struct ReportRow {
  std::string source;
  uint64_t step = 0;
  double accuracy = 0.0;
  double f1 = 0.0;
  bool best = false;
};

/// Merges TrainLog CSVs; within each source the best row has the highest
/// accuracy, ties broken by the lower step.
inline std::vector<ReportRow> build_report(const std::vector<std::string>& csv_paths) {
  std::vector<ReportRow> rows;
  for (const std::string& path : csv_paths) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("report: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw FormatError("report: empty file '" + path + "'");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "step,accuracy,f1")
      throw FormatError("report: '" + path + "' has unexpected header '" + line + "'");
    const std::string source = std::filesystem::path(path).stem().string();
    const size_t first = rows.size();
    int lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (detail::trim(line).empty()) continue;
      const std::vector<std::string> fields = detail::split_csv_line(line);
      if (fields.size() != 3)
        throw FormatError("report: '" + path + "' line " + std::to_string(lineno) +
                          ": expected 3 fields");
      ReportRow r;
      r.source = source;
      r.step = detail::parse_u64("step", detail::trim(fields[0]));
      r.accuracy = detail::parse_double("accuracy", detail::trim(fields[1]));
      r.f1 = detail::parse_double("f1", detail::trim(fields[2]));
      rows.push_back(r);
    }
    if (rows.size() == first) throw FormatError("report: '" + path + "' has no data rows");
    size_t best = first;
    for (size_t i = first + 1; i < rows.size(); ++i) {
      if (rows[i].accuracy > rows[best].accuracy ||
          (rows[i].accuracy == rows[best].accuracy && rows[i].step < rows[best].step))
        best = i;
    }
    rows[best].best = true;
  }
  return rows;
}

inline int cmd_report(const std::vector<std::string>& csv_paths, std::ostream& out,
                      std::ostream& err) {
  return run_guarded(err, [&]() {
    const std::vector<ReportRow> rows = build_report(csv_paths);
    out << "source,step,accuracy,f1,best\n";
    for (const ReportRow& r : rows)
      out << r.source << "," << r.step << "," << detail::fixed4(r.accuracy) << ","
          << detail::fixed4(r.f1) << "," << (r.best ? 1 : 0) << "\n";
    return 0;
  });
}

}  // namespace emorec
