#pragma once

// Fixtures shared between the unit suites and the acceptance runner.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <emorec/emorec.hpp>

namespace testfix {

/// Unique directory under the system temp root, removed on destruction.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    const auto stamp =
        std::chrono::steady_clock::now().time_since_epoch().count();
    path = std::filesystem::temp_directory_path() /
           (tag + "_" + std::to_string(static_cast<unsigned long long>(stamp)) + "_" +
            std::to_string(static_cast<unsigned>(
                std::hash<std::string>{}(tag) & 0xffffu)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path.string(); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// ---------------------------------------------------------------------------
// Detection fixtures
// ---------------------------------------------------------------------------

/// One-stage, one-stump cascade over a 9x9 base window: a horizontal line
/// feature (full window at weight -1, middle third at +3). The matching
/// dark-bright-dark stripe pattern scores sqrt(2) in normalized units when a
/// window covers it exactly; windows at other scales or offsets see partial
/// bands and stay near or below 1.24, so a 1.25 threshold keeps only boxes
/// aligned with the plant. A plain edge scores negative against this feature,
/// which is what makes the fixture scale-selective where a 2-rect edge
/// feature fires at every scale straddling the boundary.
inline emorec::Cascade pattern_cascade(double threshold = 1.25) {
  emorec::Cascade c;
  c.base_width = 9;
  c.base_height = 9;
  emorec::Stump stump;
  stump.feature.rects.push_back({0, 0, 9, 9, -1.0});
  stump.feature.rects.push_back({0, 3, 9, 3, 3.0});
  stump.threshold = threshold;
  stump.left_value = 0.0;
  stump.right_value = 1.0;
  emorec::CascadeStage stage;
  stage.stumps.push_back(stump);
  stage.stage_threshold = 0.5;
  c.stages.push_back(stage);
  return c;
}

/// The same cascade in the legacy XML layout the importer reads.
inline std::string pattern_cascade_xml(double threshold = 1.25) {
  std::string t = std::to_string(threshold);
  return "<?xml version=\"1.0\"?>\n"
         "<opencv_storage>\n"
         "<cascade type_id=\"opencv-haar-classifier\">\n"
         "  <size>9 9</size>\n"
         "  <stages>\n"
         "    <_>\n"
         "      <trees>\n"
         "        <_>\n"
         "          <_>\n"
         "            <feature>\n"
         "              <rects>\n"
         "                <_>0 0 9 9 -1.</_>\n"
         "                <_>0 3 9 3 3.</_>\n"
         "              </rects>\n"
         "              <tilted>0</tilted>\n"
         "            </feature>\n"
         "            <threshold>" + t + "</threshold>\n"
         "            <left_val>0.</left_val>\n"
         "            <right_val>1.</right_val>\n"
         "          </_>\n"
         "        </_>\n"
         "      </trees>\n"
         "      <stage_threshold>0.5</stage_threshold>\n"
         "    </_>\n"
         "  </stages>\n"
         "</cascade>\n"
         "</opencv_storage>\n";
}

/// Gray background with the cascade's stripe pattern planted at (x0, y0):
/// three horizontal bands of size/3 rows each, dark-bright-dark. Use a size
/// divisible by 3 so the bands are even.
inline emorec::Tensor planted_image(int width, int height, int x0, int y0, int size,
                                    double background = 128.0) {
  emorec::Tensor img({height, width}, background);
  const int band = size / 3;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      img.at(y0 + y, x0 + x) = (y >= band && y < 2 * band) ? 255.0 : 0.0;
  return img;
}

inline emorec::Tensor flat_image(int width, int height, double level) {
  return emorec::Tensor({height, width}, level);
}

inline emorec::Tensor noise_image(int width, int height, uint64_t seed) {
  emorec::SeededRng rng(seed);
  emorec::Tensor img({height, width}, 0.0);
  for (auto& v : img.data) v = std::floor(rng.uniform() * 256.0);
  return img;
}

// ---------------------------------------------------------------------------
// Classification fixtures
// ---------------------------------------------------------------------------

/// Synthetic 3-class set: class 0 lights the top-left quadrant, class 1 the
/// top-right, class 2 the bottom half, plus low-amplitude seeded noise.
/// Values are already normalized to [0,1]. Linearly separable, so a few
/// hundred steps reach perfect training accuracy.
inline std::vector<emorec::Sample> blob_dataset(int per_class, int size, uint64_t seed) {
  emorec::SeededRng rng(seed);
  std::vector<emorec::Sample> out;
  for (int cls = 0; cls < 3; ++cls) {
    for (int i = 0; i < per_class; ++i) {
      emorec::Tensor img({size, size}, 0.1);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const bool lit = cls == 0   ? (y < size / 2 && x < size / 2)
                           : cls == 1 ? (y < size / 2 && x >= size / 2)
                                      : (y >= size / 2);
          if (lit) img.at(y, x) = 0.9;
          img.at(y, x) += 0.05 * (rng.uniform() - 0.5);
        }
      }
      emorec::Sample s;
      s.image = std::move(img);
      s.label = cls;
      s.source_id = "blob" + std::to_string(cls) + "_" + std::to_string(i);
      out.push_back(std::move(s));
    }
  }
  return out;
}

/// Writes a blob-style two-class dataset as PGM files under
/// root/<ClassA>/ and root/<ClassB>/ for CLI-level runs.
inline void write_pgm_dataset(const std::string& root, const std::string& class_a,
                              const std::string& class_b, int per_class, int size,
                              uint64_t seed) {
  emorec::SeededRng rng(seed);
  namespace fs = std::filesystem;
  for (int cls = 0; cls < 2; ++cls) {
    const fs::path dir = fs::path(root) / (cls == 0 ? class_a : class_b);
    fs::create_directories(dir);
    for (int i = 0; i < per_class; ++i) {
      emorec::Tensor img({size, size}, 30.0);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const bool lit = cls == 0 ? x < size / 2 : x >= size / 2;
          img.at(y, x) = (lit ? 220.0 : 30.0) + std::floor(10.0 * rng.uniform());
        }
      char name[32];
      std::snprintf(name, sizeof name, "img%03d.pgm", i);
      emorec::write_pgm_file(img, (dir / name).string());
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient harness
// ---------------------------------------------------------------------------

/// Loss of one training-mode forward with the dropout stream pinned to
/// dropout_seed, so repeated evaluations see identical masks.
inline double loss_at(const emorec::NetworkSpec& spec, const emorec::NetworkState& state,
                      const emorec::Tensor& batch, const std::vector<int>& labels,
                      uint64_t dropout_seed) {
  emorec::SeededRng rng(dropout_seed);
  const emorec::ForwardTrace trace =
      emorec::net_forward(spec, state, batch, emorec::NetMode::Train, &rng);
  return emorec::cross_entropy_loss(trace.acts.back(), labels).first;
}

/// Hash of the piecewise structure of one forward: relu sign patterns and
/// pool argmax choices. The loss is smooth in the parameters exactly while
/// this stays constant.
inline uint64_t region_signature(const emorec::NetworkSpec& spec,
                                 const emorec::ForwardTrace& trace) {
  uint64_t hash = 1469598103934665603ULL;  // FNV-1a
  auto mix = [&hash](uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      hash ^= (v >> (8 * i)) & 0xffu;
      hash *= 1099511628211ULL;
    }
  };
  for (size_t l = 0; l < spec.layers.size(); ++l) {
    if (spec.layers[l].kind == emorec::LayerKind::Relu) {
      for (double v : trace.acts[l + 1].data) mix(v > 0.0 ? 1 : 0);
    } else if (spec.layers[l].kind == emorec::LayerKind::MaxPool) {
      for (int64_t idx : trace.argmax[l]) mix(static_cast<uint64_t>(idx));
    }
  }
  return hash;
}

inline std::pair<double, uint64_t> loss_and_region(const emorec::NetworkSpec& spec,
                                                   const emorec::NetworkState& state,
                                                   const emorec::Tensor& batch,
                                                   const std::vector<int>& labels,
                                                   uint64_t dropout_seed) {
  emorec::SeededRng rng(dropout_seed);
  const emorec::ForwardTrace trace =
      emorec::net_forward(spec, state, batch, emorec::NetMode::Train, &rng);
  return {emorec::cross_entropy_loss(trace.acts.back(), labels).first,
          region_signature(spec, trace)};
}

struct FdReport {
  double max_rel_err = 0.0;
  int checks = 0;
  int skipped = 0;  // entries whose +/-h interval straddles a relu/pool kink
};

/// Central differences (h = 1e-5) against the analytic gradients, sampling
/// up to max_per_tensor entries of every parameter tensor plus a spread of
/// input pixels. Relative error uses max(|a|, |b|, 1e-8) as denominator.
/// The loss is smooth only while the relu/pool region is constant; entries
/// whose +/-h perturbation changes the region cross a kink, where a central
/// difference is meaningless, so they are skipped and counted instead.
inline FdReport fd_check(const emorec::NetworkSpec& spec, uint64_t seed,
                         int max_per_tensor = 0) {
  const double h = 1e-5;
  emorec::SeededRng init_rng(seed);
  emorec::NetworkState state = emorec::init_state(spec, init_rng);
  const std::vector<emorec::ActShape> shapes = emorec::infer_activation_shapes(spec);
  const int k = static_cast<int>(shapes.back().elems());
  const int64_t n_batch = 2;
  emorec::Tensor batch({n_batch, spec.in_c, spec.in_h, spec.in_w}, 0.0);
  for (auto& v : batch.data) v = init_rng.uniform();
  std::vector<int> labels(static_cast<size_t>(n_batch));
  for (size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i) % k;

  const uint64_t dropout_seed = seed ^ 0x5eedULL;
  emorec::SeededRng rng(dropout_seed);
  const emorec::ForwardTrace trace =
      emorec::net_forward(spec, state, batch, emorec::NetMode::Train, &rng);
  const auto [loss, loss_grad] = emorec::cross_entropy_loss(trace.acts.back(), labels);
  (void)loss;
  const emorec::Gradients grads = emorec::net_backward(spec, state, trace, loss_grad);
  const uint64_t region0 = region_signature(spec, trace);

  FdReport report;
  auto check_entry = [&](emorec::Tensor& param, const emorec::Tensor& analytic, int64_t idx) {
    const double keep = param.data[static_cast<size_t>(idx)];
    param.data[static_cast<size_t>(idx)] = keep + h;
    const auto [lp, region_p] = loss_and_region(spec, state, batch, labels, dropout_seed);
    param.data[static_cast<size_t>(idx)] = keep - h;
    const auto [lm, region_m] = loss_and_region(spec, state, batch, labels, dropout_seed);
    param.data[static_cast<size_t>(idx)] = keep;
    if (region_p != region0 || region_m != region0) {
      ++report.skipped;
      return;
    }
    const double fd = (lp - lm) / (2.0 * h);
    const double an = analytic.data[static_cast<size_t>(idx)];
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
    const double rel = std::abs(fd - an) / denom;
    if (rel > report.max_rel_err) report.max_rel_err = rel;
    ++report.checks;
  };
  auto sweep = [&](emorec::Tensor& param, const emorec::Tensor& analytic) {
    const int64_t n = param.numel();
    const int64_t limit = max_per_tensor > 0 ? std::min<int64_t>(n, max_per_tensor) : n;
    const int64_t stride = std::max<int64_t>(1, n / limit);
    for (int64_t idx = 0; idx < n; idx += stride) check_entry(param, analytic, idx);
  };
  for (size_t i = 0; i < state.weights.size(); ++i) {
    if (state.weights[i].numel() == 0) continue;
    sweep(state.weights[i], grads.weights[i]);
    sweep(state.biases[i], grads.biases[i]);
  }
  // input gradient through the whole stack
  {
    const int64_t n = batch.numel();
    const int64_t limit = std::min<int64_t>(n, max_per_tensor > 0 ? max_per_tensor : 32);
    const int64_t stride = std::max<int64_t>(1, n / limit);
    for (int64_t idx = 0; idx < n; idx += stride) check_entry(batch, grads.input, idx);
  }
  return report;
}

/// Whole file as bytes, for bitwise artifact comparisons.
inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_file: cannot open '" + path + "'");
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace testfix
