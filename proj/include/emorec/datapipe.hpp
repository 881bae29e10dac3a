#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace emorec {

struct Sample {
  Tensor image;  // rank-2, raw 0..255 on load, [0,1] after preprocess
  int label = 0;
  std::string source_id;  // file stem
};

/// Class names kept in alphabetical order so indices are stable across runs
/// and languages (Disgust=0, Joy=1, Neutral=2 in the 3-class setting).
struct LabelMap {
  std::vector<std::string> names;

  static LabelMap from_names(std::vector<std::string> raw) {
    std::sort(raw.begin(), raw.end());
    raw.erase(std::unique(raw.begin(), raw.end()), raw.end());
    if (raw.empty()) throw ParamError("LabelMap: no class names given");
    LabelMap m;
    m.names = std::move(raw);
    return m;
  }

  int size() const { return static_cast<int>(names.size()); }

  int index_of(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    return it == names.end() ? -1 : static_cast<int>(it - names.begin());
  }

  const std::string& name_of(int label) const {
    if (label < 0 || label >= size())
      throw LabelError("LabelMap: label " + std::to_string(label) + " out of range");
    return names[static_cast<size_t>(label)];
  }
};

struct SplitPlan {
  int64_t train_per_class = 0;
  int64_t val_per_class = 0;  // remainder of each class goes to test
};

// ---------------------------------------------------------------------------
// P5 portable graymap
// ---------------------------------------------------------------------------

namespace detail {

// Skips whitespace and '#' comments, then reads one unsigned decimal token.
inline int64_t pgm_token(const std::vector<unsigned char>& bytes, size_t& pos) {
  for (;;) {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= bytes.size() || !std::isdigit(bytes[pos]))
    throw FormatError("pgm: expected numeric header token at byte " + std::to_string(pos));
  int64_t v = 0;
  while (pos < bytes.size() && std::isdigit(bytes[pos])) {
    v = v * 10 + (bytes[pos] - '0');
    if (v > 1000000000) throw FormatError("pgm: header value out of range");
    ++pos;
  }
  return v;
}

}  // namespace detail

inline Tensor load_pgm(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    throw FormatError("pgm: bad magic, expected P5");
  size_t pos = 2;
  const int64_t width = detail::pgm_token(bytes, pos);
  const int64_t height = detail::pgm_token(bytes, pos);
  const int64_t maxval = detail::pgm_token(bytes, pos);
  if (width < 1 || height < 1) throw FormatError("pgm: non-positive dimensions");
  if (maxval > 255) throw FormatError("pgm: maxval " + std::to_string(maxval) + " > 255");
  if (maxval < 1) throw FormatError("pgm: maxval < 1");
  if (pos >= bytes.size() || !std::isspace(bytes[pos]))
    throw FormatError("pgm: missing whitespace after maxval");
  ++pos;  // exactly one whitespace byte separates header and payload
  const size_t need = static_cast<size_t>(width) * static_cast<size_t>(height);
  if (bytes.size() - pos < need)
    throw FormatError("pgm: truncated payload, need " + std::to_string(need) + " bytes, have " +
                      std::to_string(bytes.size() - pos));
  Tensor img({height, width}, 0.0);
  for (size_t i = 0; i < need; ++i) img.data[i] = static_cast<double>(bytes[pos + i]);
  return img;
}

inline Tensor load_pgm_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  try {
    return load_pgm(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

/// Values are clamped to [0,255] and rounded to the nearest byte.
inline void write_pgm_file(const Tensor& img, const std::string& path) {
  if (img.rank() != 2) throw ShapeError("write_pgm_file: expected rank-2 image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "P5\n" << img.dims[1] << " " << img.dims[0] << "\n255\n";
  for (double v : img.data) {
    long b = std::lround(v);
    if (b < 0) b = 0;
    if (b > 255) b = 255;
    out.put(static_cast<char>(static_cast<unsigned char>(b)));
  }
  if (!out) throw DataError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Bilinear resize with corner-aligned sampling (output corners hit source
/// corners exactly), then scale into [0,1] by dividing by 255.
inline Tensor preprocess(const Tensor& gray, int target_size) {
  if (gray.rank() != 2) throw ShapeError("preprocess: expected rank-2 image");
  if (target_size < 1) throw ParamError("preprocess: target size must be >= 1");
  const int64_t sh = gray.dims[0], sw = gray.dims[1];
  const int64_t s = target_size;
  Tensor out({s, s}, 0.0);
  const double ry = s > 1 ? static_cast<double>(sh - 1) / static_cast<double>(s - 1) : 0.0;
  const double rx = s > 1 ? static_cast<double>(sw - 1) / static_cast<double>(s - 1) : 0.0;
  for (int64_t i = 0; i < s; ++i) {
    const double fy = static_cast<double>(i) * ry;
    const int64_t y0 = static_cast<int64_t>(fy);
    const int64_t y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - static_cast<double>(y0);
    for (int64_t j = 0; j < s; ++j) {
      const double fx = static_cast<double>(j) * rx;
      const int64_t x0 = static_cast<int64_t>(fx);
      const int64_t x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = gray.at(y0, x0) * (1.0 - wx) + gray.at(y0, x1) * wx;
      const double bot = gray.at(y1, x0) * (1.0 - wx) + gray.at(y1, x1) * wx;
      out.at(i, j) = (top * (1.0 - wy) + bot * wy) / 255.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset loading and splitting
// ---------------------------------------------------------------------------

/// Expects the layout root/<ClassName>/*.pgm. Samples come back sorted by
/// (class, filename) so downstream shuffles see a stable order no matter how
/// the filesystem enumerates entries.
inline std::vector<Sample> load_dataset(const std::string& root_dir, const LabelMap& labels) {
  namespace fs = std::filesystem;
  if (!fs::exists(root_dir)) throw DataError("dataset root not found: " + root_dir);
  std::vector<Sample> samples;
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root_dir)) {
    if (!entry.is_directory()) continue;
    class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  for (const auto& dir : class_dirs) {
    const std::string cls = dir.filename().string();
    const int label = labels.index_of(cls);
    if (label < 0)
      throw DataError("unknown class directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      if (entry.path().extension() == ".pgm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Sample s;
      s.image = load_pgm_file(f.string());
      s.label = label;
      s.source_id = f.stem().string();
      samples.push_back(std::move(s));
    }
  }
  std::sort(samples.begin(), samples.end(), [](const Sample& a, const Sample& b) {
    if (a.label != b.label) return a.label < b.label;
    return a.source_id < b.source_id;
  });
  return samples;
}

inline std::vector<Sample> preprocess_samples(const std::vector<Sample>& samples, int target_size) {
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    Sample p;
    p.image = preprocess(s.image, target_size);
    p.label = s.label;
    p.source_id = s.source_id;
    out.push_back(std::move(p));
  }
  return out;
}

struct SplitResult {
  std::vector<Sample> train;
  std::vector<Sample> validation;
  std::vector<Sample> test;
};

/// Stratified split: per class, Fisher-Yates shuffle with the caller's seeded
/// generator, then the first train_per_class go to training, the next
/// val_per_class to validation, and the remainder to test.
inline SplitResult split_dataset(const std::vector<Sample>& samples, const SplitPlan& plan,
                                 SeededRng& rng) {
  if (plan.train_per_class < 0 || plan.val_per_class < 0)
    throw ParamError("split_dataset: negative plan counts");
  int max_label = -1;
  for (const auto& s : samples) max_label = std::max(max_label, s.label);
  SplitResult result;
  for (int cls = 0; cls <= max_label; ++cls) {
    std::vector<const Sample*> members;
    for (const auto& s : samples)
      if (s.label == cls) members.push_back(&s);
    if (static_cast<int64_t>(members.size()) < plan.train_per_class + plan.val_per_class)
      throw DataError("split_dataset: class " + std::to_string(cls) + " has " +
                      std::to_string(members.size()) + " samples, plan needs " +
                      std::to_string(plan.train_per_class + plan.val_per_class));
    rng_shuffle(rng, members);
    int64_t idx = 0;
    for (; idx < plan.train_per_class; ++idx) result.train.push_back(*members[idx]);
    for (; idx < plan.train_per_class + plan.val_per_class; ++idx)
      result.validation.push_back(*members[idx]);
    for (; idx < static_cast<int64_t>(members.size()); ++idx) result.test.push_back(*members[idx]);
  }
  return result;
}

}  // namespace emorec
