#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "datapipe.hpp"
#include "errors.hpp"
#include "metrics.hpp"
#include "net.hpp"
#include "tensor.hpp"

namespace emorec {

struct SolverConfig {
  int train_batch_size = 10;
  int test_batch_size = 16;
  int test_iterations = 7;
  int test_interval = 50;
  int max_iterations = 1000;
  uint64_t seed = 1234;
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline void validate_config(const SolverConfig& cfg) {
  if (cfg.train_batch_size < 1 || cfg.test_batch_size < 1 || cfg.test_iterations < 1 ||
      cfg.test_interval < 1 || cfg.max_iterations < 1)
    throw ParamError("solver config: all counts must be >= 1");
  if (!(cfg.learning_rate > 0.0)) throw ParamError("solver config: learning rate must be > 0");
  if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
    throw ParamError("solver config: betas must be in [0,1)");
  if (!(cfg.epsilon > 0.0)) throw ParamError("solver config: epsilon must be > 0");
}

// ---------------------------------------------------------------------------
// ADAM
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  uint64_t t = 0;
};

/// One update: t += 1; m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2;
/// theta -= lr * mhat / (sqrt(vhat) + eps) with bias-corrected moments.
/// Moment tensors are created lazily on the first call.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                      AdamState& state, const SolverConfig& cfg) {
  validate_config(cfg);
  if (params.size() != grads.size()) throw ShapeError("adam_step: param/grad count mismatch");
  if (state.m.empty()) {
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const Tensor* p : params) {
      state.m.emplace_back(p->dims, 0.0);
      state.v.emplace_back(p->dims, 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: moment count mismatch");
  state.t += 1;
  const double corr1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double corr2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (!p.same_dims(g) || !p.same_dims(state.m[i]))
      throw ShapeError("adam_step: dim mismatch at parameter " + std::to_string(i));
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (size_t q = 0; q < p.data.size(); ++q) {
      m.data[q] = cfg.beta1 * m.data[q] + (1.0 - cfg.beta1) * g.data[q];
      v.data[q] = cfg.beta2 * v.data[q] + (1.0 - cfg.beta2) * g.data[q] * g.data[q];
      const double mhat = m.data[q] / corr1;
      const double vhat = v.data[q] / corr2;
      p.data[q] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Batch assembly and evaluation
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

/// Stacks rank-2 sample images into an (n,1,H,W) batch.
inline std::pair<Tensor, std::vector<int>> make_batch(const std::vector<Sample>& samples,
                                                      const std::vector<size_t>& picks,
                                                      const NetworkSpec& spec) {
  Tensor batch({static_cast<int64_t>(picks.size()), spec.in_c, spec.in_h, spec.in_w}, 0.0);
  std::vector<int> labels(picks.size());
  const int64_t plane = static_cast<int64_t>(spec.in_h) * spec.in_w;
  for (size_t i = 0; i < picks.size(); ++i) {
    const Sample& s = samples[picks[i]];
    if (spec.in_c != 1 || s.image.rank() != 2 || s.image.dims[0] != spec.in_h ||
        s.image.dims[1] != spec.in_w)
      throw ShapeError("batch: sample '" + s.source_id + "' dims " + dims_to_string(s.image.dims) +
                       " do not match network input " + std::to_string(spec.in_h) + "x" +
                       std::to_string(spec.in_w));
    std::copy(s.image.data.begin(), s.image.data.end(),
              batch.data.begin() + static_cast<int64_t>(i) * plane);
    labels[i] = s.label;
  }
  return {std::move(batch), std::move(labels)};
}

}  // namespace detail

struct EvalResult {
  ConfusionMatrix cm{2};
  double accuracy = 0.0;
  double micro_f1 = 0.0;
  std::vector<double> per_class_f1;
  double f1 = 0.0;  // class F1 when a positive class is set, micro-F1 otherwise
  size_t count = 0;
};

/// Inference-mode forward over the whole set in fixed-size chunks.
inline EvalResult evaluate(const NetworkSpec& spec, const NetworkState& state,
                           const std::vector<Sample>& samples, int positive_class = -1,
                           int batch_size = 64) {
  if (samples.empty()) throw DataError("evaluate: empty sample set");
  if (batch_size < 1) throw ParamError("evaluate: batch size must be >= 1");
  const std::vector<ActShape> shapes = infer_activation_shapes(spec);
  const int k = static_cast<int>(shapes.back().elems());
  if (positive_class >= k) throw LabelError("evaluate: positive class out of range");
  EvalResult result;
  result.cm = ConfusionMatrix(k);
  for (size_t start = 0; start < samples.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(samples.size(), start + static_cast<size_t>(batch_size));
    std::vector<size_t> picks(stop - start);
    for (size_t i = 0; i < picks.size(); ++i) picks[i] = start + i;
    auto [batch, labels] = detail::make_batch(samples, picks, spec);
    const ForwardTrace trace = net_forward(spec, state, batch, NetMode::Infer);
    const std::vector<int> preds = argmax_rows(trace.acts.back());
    result.cm.merge(confusion(preds, labels, k));
  }
  result.count = samples.size();
  result.accuracy = accuracy_of(result.cm);
  result.micro_f1 = micro_f1(result.cm);
  result.per_class_f1.resize(static_cast<size_t>(k));
  for (int c = 0; c < k; ++c) result.per_class_f1[static_cast<size_t>(c)] = f1_of_class(result.cm, c);
  result.f1 = positive_class >= 0 ? result.per_class_f1[static_cast<size_t>(positive_class)]
                                  : result.micro_f1;
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint: truncated file");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

inline uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("checkpoint: truncated file");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) {
  const uint64_t bits = get_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_u32(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.dims) put_u32(os, static_cast<uint32_t>(d));
  for (double v : t.data) put_f64(os, v);
}

inline std::pair<std::string, Tensor> get_tensor(std::istream& is) {
  const uint32_t name_len = get_u32(is);
  if (name_len > 4096) throw FormatError("checkpoint: implausible tensor name length");
  std::string name(name_len, '\0');
  if (name_len && !is.read(name.data(), name_len)) throw FormatError("checkpoint: truncated file");
  const uint32_t rank = get_u32(is);
  if (rank < 1 || rank > 4) throw FormatError("checkpoint: tensor rank out of range");
  std::vector<int64_t> dims(rank);
  for (auto& d : dims) {
    d = get_u32(is);
    if (d < 1) throw FormatError("checkpoint: non-positive tensor dim");
  }
  Tensor t(dims, 0.0);
  for (auto& v : t.data) v = get_f64(is);
  return {std::move(name), std::move(t)};
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'E', 'M', 'R', 'C'};
inline constexpr uint32_t kCheckpointVersion = 1;

/// Layout: magic "EMRC", version u32, step u64, tensor count u32, then one
/// record per parameter in layer order ("layer<i>.weight", "layer<i>.bias");
/// each record is name length u32 + name, rank u32, dims u32 x rank, float64
/// payload. One flag byte follows; if 1 an optimizer block is appended:
/// step counter u64, record count u32, then "m.<param>" records for every
/// parameter followed by "v.<param>" records. Everything little-endian.
inline void save_checkpoint(const NetworkSpec& spec, const NetworkState& state,
                            const AdamState* adam, uint64_t step, const std::string& path) {
  const std::vector<std::string> names = param_names(spec);
  std::vector<const Tensor*> tensors;
  for (size_t i = 0; i < state.weights.size(); ++i) {
    if (state.weights[i].numel() == 0) continue;
    tensors.push_back(&state.weights[i]);
    tensors.push_back(&state.biases[i]);
  }
  if (tensors.size() != names.size())
    throw ShapeError("save_checkpoint: state does not match network layout");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("save_checkpoint: cannot open '" + path + "'");
  os.write(kCheckpointMagic, 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u64(os, step);
  detail::put_u32(os, static_cast<uint32_t>(names.size()));
  for (size_t i = 0; i < names.size(); ++i) detail::put_tensor(os, names[i], *tensors[i]);
  const bool with_adam = adam && !adam->m.empty();
  os.put(with_adam ? '\x01' : '\x00');
  if (with_adam) {
    if (adam->m.size() != names.size() || adam->v.size() != names.size())
      throw ShapeError("save_checkpoint: optimizer state does not match network layout");
    detail::put_u64(os, adam->t);
    detail::put_u32(os, static_cast<uint32_t>(2 * names.size()));
    for (size_t i = 0; i < names.size(); ++i)
      detail::put_tensor(os, "m." + names[i], adam->m[i]);
    for (size_t i = 0; i < names.size(); ++i)
      detail::put_tensor(os, "v." + names[i], adam->v[i]);
  }
  if (!os) throw FormatError("save_checkpoint: write failed for '" + path + "'");
}

struct Checkpoint {
  NetworkState state;
  AdamState adam;
  bool has_adam = false;
  uint64_t step = 0;
};

inline Checkpoint load_checkpoint(const std::string& path, const NetworkSpec& spec) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("load_checkpoint: cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw FormatError("load_checkpoint: bad magic");
  const uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion)
    throw FormatError("load_checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.step = detail::get_u64(is);
  const uint32_t count = detail::get_u32(is);
  const std::vector<std::string> names = param_names(spec);
  if (count != names.size())
    throw FormatError("load_checkpoint: tensor count " + std::to_string(count) +
                      " does not match network (" + std::to_string(names.size()) + ")");
  const NetworkState reference = zero_state(spec);
  ck.state = reference;
  std::vector<Tensor*> slots;
  for (size_t i = 0; i < ck.state.weights.size(); ++i) {
    if (ck.state.weights[i].numel() == 0) continue;
    slots.push_back(&ck.state.weights[i]);
    slots.push_back(&ck.state.biases[i]);
  }
  for (size_t i = 0; i < names.size(); ++i) {
    auto [name, tensor] = detail::get_tensor(is);
    if (name != names[i])
      throw FormatError("load_checkpoint: expected tensor '" + names[i] + "', found '" + name +
                        "'");
    if (!tensor.same_dims(*slots[i]))
      throw FormatError("load_checkpoint: dims " + dims_to_string(tensor.dims) + " for '" + name +
                        "' do not match network " + dims_to_string(slots[i]->dims));
    *slots[i] = std::move(tensor);
  }
  int flag = is.get();
  if (flag == std::char_traits<char>::eof()) throw FormatError("checkpoint: truncated file");
  if (flag != 0 && flag != 1) throw FormatError("load_checkpoint: bad optimizer flag");
  if (flag == 1) {
    ck.has_adam = true;
    ck.adam.t = detail::get_u64(is);
    const uint32_t adam_count = detail::get_u32(is);
    if (adam_count != 2 * names.size())
      throw FormatError("load_checkpoint: optimizer record count mismatch");
    ck.adam.m.resize(names.size());
    ck.adam.v.resize(names.size());
    for (int pass = 0; pass < 2; ++pass) {
      const char* prefix = pass == 0 ? "m." : "v.";
      auto& dest = pass == 0 ? ck.adam.m : ck.adam.v;
      for (size_t i = 0; i < names.size(); ++i) {
        auto [name, tensor] = detail::get_tensor(is);
        if (name != prefix + names[i])
          throw FormatError("load_checkpoint: expected optimizer tensor '" + (prefix + names[i]) +
                            "', found '" + name + "'");
        if (!tensor.same_dims(*slots[i]))
          throw FormatError("load_checkpoint: optimizer dims do not match parameter '" + names[i] +
                            "'");
        dest[i] = std::move(tensor);
      }
    }
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainLogRow {
  uint64_t step = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double val_f1 = 0.0;
};

inline void write_train_log_csv(const std::vector<TrainLogRow>& rows, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("write_train_log_csv: cannot open '" + path + "'");
  os << "step,accuracy,f1\n";
  for (const TrainLogRow& r : rows)
    os << r.step << "," << detail::fixed4(r.val_accuracy) << "," << detail::fixed4(r.val_f1)
       << "\n";
  if (!os) throw FormatError("write_train_log_csv: write failed for '" + path + "'");
}

/// Sequential schedule: one optimizer step per iteration over an epoch-wise
/// shuffled cursor (reshuffled by the caller's rng at each full pass), a
/// validation sweep plus checkpoint every test_interval steps. Validation
/// cycles deterministically from the start of val_set, test_iterations
/// batches of test_batch_size with wrap-around, and consumes no rng. The
/// returned rows carry (step, loss on the step's own batch, val accuracy,
/// val F1), F1 being the positive class's when one is given and micro-F1
/// otherwise. checkpoint_dir == "" disables checkpoint files.
inline std::vector<TrainLogRow> train(const NetworkSpec& spec, NetworkState& state,
                                      const std::vector<Sample>& train_set,
                                      const std::vector<Sample>& val_set, const SolverConfig& cfg,
                                      SeededRng& rng, const std::string& checkpoint_dir = "",
                                      int positive_class = -1) {
  validate_config(cfg);
  if (train_set.size() < static_cast<size_t>(cfg.train_batch_size))
    throw DataError("train: training set smaller than one batch");
  if (val_set.empty()) throw DataError("train: empty validation set");
  const std::vector<ActShape> shapes = infer_activation_shapes(spec);
  const int k = static_cast<int>(shapes.back().elems());
  if (positive_class >= k) throw LabelError("train: positive class out of range");
  if (!checkpoint_dir.empty()) std::filesystem::create_directories(checkpoint_dir);

  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng_shuffle(rng, order);
  size_t cursor = 0;

  AdamState adam;
  std::vector<TrainLogRow> log;
  std::vector<size_t> picks(static_cast<size_t>(cfg.train_batch_size));

  for (int step = 1; step <= cfg.max_iterations; ++step) {
    for (auto& p : picks) {
      if (cursor == order.size()) {
        rng_shuffle(rng, order);
        cursor = 0;
      }
      p = order[cursor++];
    }
    auto [batch, labels] = detail::make_batch(train_set, picks, spec);
    const ForwardTrace trace = net_forward(spec, state, batch, NetMode::Train, &rng);
    auto [loss, loss_grad] = cross_entropy_loss(trace.acts.back(), labels);
    const Gradients grads = net_backward(spec, state, trace, loss_grad);

    std::vector<Tensor*> params;
    std::vector<const Tensor*> gptrs;
    for (size_t i = 0; i < state.weights.size(); ++i) {
      if (state.weights[i].numel() == 0) continue;
      params.push_back(&state.weights[i]);
      params.push_back(&state.biases[i]);
      gptrs.push_back(&grads.weights[i]);
      gptrs.push_back(&grads.biases[i]);
    }
    adam_step(params, gptrs, adam, cfg);

    if (step % cfg.test_interval == 0) {
      ConfusionMatrix cm(k);
      size_t val_cursor = 0;
      for (int it = 0; it < cfg.test_iterations; ++it) {
        std::vector<size_t> vp(static_cast<size_t>(cfg.test_batch_size));
        for (auto& p : vp) {
          p = val_cursor % val_set.size();
          ++val_cursor;
        }
        auto [vbatch, vlabels] = detail::make_batch(val_set, vp, spec);
        const ForwardTrace vtrace = net_forward(spec, state, vbatch, NetMode::Infer);
        cm.merge(confusion(argmax_rows(vtrace.acts.back()), vlabels, k));
      }
      TrainLogRow row;
      row.step = static_cast<uint64_t>(step);
      row.train_loss = loss;
      row.val_accuracy = accuracy_of(cm);
      row.val_f1 = positive_class >= 0 ? f1_of_class(cm, positive_class) : micro_f1(cm);
      log.push_back(row);
      if (!checkpoint_dir.empty()) {
        char name[32];
        std::snprintf(name, sizeof name, "ckpt_%06d.bin", step);
        save_checkpoint(spec, state, &adam, static_cast<uint64_t>(step),
                        (std::filesystem::path(checkpoint_dir) / name).string());
      }
    }
  }
  return log;
}

}  // namespace emorec
