#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace emorec {

// ---------------------------------------------------------------------------
// Threshold perceptron
// ---------------------------------------------------------------------------

struct Perceptron {
  std::vector<double> weights;
  double threshold = 0.0;
};

/// 1 iff sum_j w_j * x_j > threshold; equality yields 0.
inline int perceptron_output(const Perceptron& p, const std::vector<int>& x) {
  if (p.weights.empty()) throw ShapeError("perceptron_output: empty weight vector");
  if (x.size() != p.weights.size())
    throw ShapeError("perceptron_output: input length " + std::to_string(x.size()) +
                     " != weight count " + std::to_string(p.weights.size()));
  double sum = 0.0;
  for (size_t j = 0; j < x.size(); ++j) sum += p.weights[j] * x[j];
  return sum > p.threshold ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Layer specs and network structure
// ---------------------------------------------------------------------------

enum class LayerKind { Convolution, MaxPool, Relu, InnerProduct, Dropout, Softmax };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Convolution: return "convolution";
    case LayerKind::MaxPool: return "max_pool";
    case LayerKind::Relu: return "relu";
    case LayerKind::InnerProduct: return "inner_product";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int units = 0;    // convolution: output channels; inner_product: output units
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  double rate = 0.0;  // dropout

  static LayerSpec conv(int channels, int kernel, int stride = 1, int pad = 0) {
    if (channels < 1 || kernel < 1 || stride < 1 || pad < 0)
      throw ParamError("conv layer: bad hyperparameters");
    LayerSpec s;
    s.kind = LayerKind::Convolution;
    s.units = channels;
    s.kernel = kernel;
    s.stride = stride;
    s.pad = pad;
    return s;
  }
  static LayerSpec max_pool(int kernel, int stride) {
    if (kernel < 1 || stride < 1) throw ParamError("max_pool layer: bad hyperparameters");
    LayerSpec s;
    s.kind = LayerKind::MaxPool;
    s.kernel = kernel;
    s.stride = stride;
    return s;
  }
  static LayerSpec relu() {
    LayerSpec s;
    s.kind = LayerKind::Relu;
    return s;
  }
  static LayerSpec inner_product(int units) {
    if (units < 1) throw ParamError("inner_product layer: units must be >= 1");
    LayerSpec s;
    s.kind = LayerKind::InnerProduct;
    s.units = units;
    return s;
  }
  static LayerSpec dropout(double rate) {
    if (rate < 0.0 || rate >= 1.0) throw ParamError("dropout layer: rate must be in [0,1)");
    LayerSpec s;
    s.kind = LayerKind::Dropout;
    s.rate = rate;
    return s;
  }
  static LayerSpec softmax() {
    LayerSpec s;
    s.kind = LayerKind::Softmax;
    return s;
  }
};

struct NetworkSpec {
  int in_c = 0, in_h = 0, in_w = 0;
  std::vector<LayerSpec> layers;
  int num_classes = 0;  // 0 disables the head-width check
};

/// Activation shape between layers: spatial C x H x W until the first
/// inner_product flattens it to a plain vector of width d.
struct ActShape {
  bool flat = false;
  int c = 0, h = 0, w = 0;
  int64_t d = 0;  // valid when flat

  int64_t elems() const { return flat ? d : static_cast<int64_t>(c) * h * w; }
};

inline std::vector<ActShape> infer_activation_shapes(const NetworkSpec& spec) {
  if (spec.in_c < 1 || spec.in_h < 1 || spec.in_w < 1)
    throw ShapeError("network: bad input dims");
  std::vector<ActShape> shapes;
  ActShape cur;
  cur.c = spec.in_c;
  cur.h = spec.in_h;
  cur.w = spec.in_w;
  shapes.push_back(cur);
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
    switch (l.kind) {
      case LayerKind::Convolution: {
        if (cur.flat) throw ShapeError(where + ": needs spatial input");
        const int he = cur.h + 2 * l.pad - l.kernel;
        const int we = cur.w + 2 * l.pad - l.kernel;
        if (he < 0 || we < 0)
          throw ShapeError(where + ": kernel " + std::to_string(l.kernel) + " exceeds input " +
                           std::to_string(cur.h) + "x" + std::to_string(cur.w));
        if (he % l.stride != 0 || we % l.stride != 0)
          throw ShapeError(where + ": non-integral output size");
        cur.c = l.units;
        cur.h = he / l.stride + 1;
        cur.w = we / l.stride + 1;
        break;
      }
      case LayerKind::MaxPool: {
        if (cur.flat) throw ShapeError(where + ": needs spatial input");
        if (l.kernel > cur.h || l.kernel > cur.w)
          throw ShapeError(where + ": kernel " + std::to_string(l.kernel) + " exceeds input " +
                           std::to_string(cur.h) + "x" + std::to_string(cur.w));
        const int he = cur.h - l.kernel;
        const int we = cur.w - l.kernel;
        if (he % l.stride != 0 || we % l.stride != 0)
          throw ShapeError(where + ": non-integral output size");
        cur.h = he / l.stride + 1;
        cur.w = we / l.stride + 1;
        break;
      }
      case LayerKind::Relu:
      case LayerKind::Dropout:
        break;
      case LayerKind::InnerProduct: {
        const int64_t d_in = cur.elems();
        cur.flat = true;
        cur.d = l.units;
        (void)d_in;
        break;
      }
      case LayerKind::Softmax: {
        if (!cur.flat) throw ShapeError(where + ": needs a flattened input");
        if (cur.d < 2) throw ShapeError(where + ": needs at least 2 classes");
        break;
      }
    }
    shapes.push_back(cur);
  }
  if (spec.num_classes > 0 && !spec.layers.empty()) {
    const ActShape& last = shapes.back();
    const int64_t width = last.flat ? last.d : last.elems();
    if (width != spec.num_classes)
      throw ShapeError("network: final width " + std::to_string(width) + " != num_classes " +
                       std::to_string(spec.num_classes));
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct NetworkState {
  // indexed by layer; empty tensors for non-parameterized layers
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
};

/// Xavier-uniform weights (range +-sqrt(6/(fan_in+fan_out))), zero biases.
/// Draw order is fixed: layers in order, weights row-major.
inline NetworkState init_state(const NetworkSpec& spec, SeededRng& rng) {
  const std::vector<ActShape> shapes = infer_activation_shapes(spec);
  NetworkState state;
  state.weights.resize(spec.layers.size());
  state.biases.resize(spec.layers.size());
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::Convolution) {
      const int c_in = shapes[i].c;
      const double fan_in = static_cast<double>(c_in) * l.kernel * l.kernel;
      const double fan_out = static_cast<double>(l.units) * l.kernel * l.kernel;
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      Tensor w({l.units, c_in, l.kernel, l.kernel}, 0.0);
      for (auto& v : w.data) v = bound * (2.0 * rng.uniform() - 1.0);
      state.weights[i] = std::move(w);
      state.biases[i] = Tensor({l.units}, 0.0);
    } else if (l.kind == LayerKind::InnerProduct) {
      const int64_t d_in = shapes[i].elems();
      const double bound = std::sqrt(6.0 / (static_cast<double>(d_in) + l.units));
      Tensor w({d_in, l.units}, 0.0);
      for (auto& v : w.data) v = bound * (2.0 * rng.uniform() - 1.0);
      state.weights[i] = std::move(w);
      state.biases[i] = Tensor({l.units}, 0.0);
    }
  }
  return state;
}

/// Parameter tensors of the right dims, zero-filled. Used as the dim
/// reference when validating serialized states.
inline NetworkState zero_state(const NetworkSpec& spec) {
  const std::vector<ActShape> shapes = infer_activation_shapes(spec);
  NetworkState state;
  state.weights.resize(spec.layers.size());
  state.biases.resize(spec.layers.size());
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::Convolution) {
      state.weights[i] = Tensor({l.units, shapes[i].c, l.kernel, l.kernel}, 0.0);
      state.biases[i] = Tensor({l.units}, 0.0);
    } else if (l.kind == LayerKind::InnerProduct) {
      state.weights[i] = Tensor({shapes[i].elems(), l.units}, 0.0);
      state.biases[i] = Tensor({l.units}, 0.0);
    }
  }
  return state;
}

inline std::vector<std::string> param_names(const NetworkSpec& spec) {
  std::vector<std::string> names;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerKind k = spec.layers[i].kind;
    if (k == LayerKind::Convolution || k == LayerKind::InnerProduct) {
      names.push_back("layer" + std::to_string(i) + ".weight");
      names.push_back("layer" + std::to_string(i) + ".bias");
    }
  }
  return names;
}

inline std::vector<Tensor*> param_tensors(NetworkState& state) {
  std::vector<Tensor*> out;
  for (size_t i = 0; i < state.weights.size(); ++i) {
    if (state.weights[i].numel() == 0) continue;
    out.push_back(&state.weights[i]);
    out.push_back(&state.biases[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer kernels
// ---------------------------------------------------------------------------

namespace detail {

// (C*k*k) x (H'*W') patch matrix for one sample; zero outside the padded input.
inline Tensor im2col(const Tensor& input, int64_t n, int c_in, int h_in, int w_in, int k, int s,
                     int p, int h_out, int w_out) {
  Tensor cols({static_cast<int64_t>(c_in) * k * k, static_cast<int64_t>(h_out) * w_out}, 0.0);
  const double* in = input.data.data() + n * c_in * h_in * w_in;
  double* out = cols.data.data();
  const int64_t plane = static_cast<int64_t>(h_in) * w_in;
  for (int c = 0; c < c_in; ++c) {
    for (int u = 0; u < k; ++u) {
      for (int v = 0; v < k; ++v) {
        double* row = out + ((static_cast<int64_t>(c) * k + u) * k + v) * h_out * w_out;
        for (int i = 0; i < h_out; ++i) {
          const int y = i * s - p + u;
          if (y < 0 || y >= h_in) continue;
          for (int j = 0; j < w_out; ++j) {
            const int x = j * s - p + v;
            if (x < 0 || x >= w_in) continue;
            row[static_cast<int64_t>(i) * w_out + j] = in[c * plane + static_cast<int64_t>(y) * w_in + x];
          }
        }
      }
    }
  }
  return cols;
}

inline void col2im_add(const Tensor& cols, double* grad_in, int c_in, int h_in, int w_in, int k,
                       int s, int p, int h_out, int w_out) {
  const double* src = cols.data.data();
  const int64_t plane = static_cast<int64_t>(h_in) * w_in;
  for (int c = 0; c < c_in; ++c) {
    for (int u = 0; u < k; ++u) {
      for (int v = 0; v < k; ++v) {
        const double* row = src + ((static_cast<int64_t>(c) * k + u) * k + v) * h_out * w_out;
        for (int i = 0; i < h_out; ++i) {
          const int y = i * s - p + u;
          if (y < 0 || y >= h_in) continue;
          for (int j = 0; j < w_out; ++j) {
            const int x = j * s - p + v;
            if (x < 0 || x >= w_in) continue;
            grad_in[c * plane + static_cast<int64_t>(y) * w_in + x] +=
                row[static_cast<int64_t>(i) * w_out + j];
          }
        }
      }
    }
  }
}

inline Tensor transpose2d(const Tensor& a) {
  Tensor t({a.dims[1], a.dims[0]}, 0.0);
  for (int64_t i = 0; i < a.dims[0]; ++i)
    for (int64_t j = 0; j < a.dims[1]; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

}  // namespace detail

/// out[n][f][i][j] = bias[f] + sum_{c,u,v} in[n][c][i*s-p+u][j*s-p+v] * w[f][c][u][v]
inline Tensor conv_forward(const Tensor& input, const Tensor& weights, const Tensor& bias,
                           int stride, int pad) {
  if (input.rank() != 4 || weights.rank() != 4)
    throw ShapeError("conv_forward: expected rank-4 input and weights");
  const int64_t n_batch = input.dims[0], c_in = input.dims[1], h_in = input.dims[2],
                w_in = input.dims[3];
  const int64_t f = weights.dims[0], k = weights.dims[2];
  if (weights.dims[1] != c_in || weights.dims[2] != weights.dims[3])
    throw ShapeError("conv_forward: weight dims " + dims_to_string(weights.dims) +
                     " incompatible with input channels " + std::to_string(c_in));
  if (bias.rank() != 1 || bias.dims[0] != f) throw ShapeError("conv_forward: bad bias dims");
  const int64_t he = h_in + 2 * pad - k;
  const int64_t we = w_in + 2 * pad - k;
  if (he < 0 || we < 0 || he % stride != 0 || we % stride != 0)
    throw ShapeError("conv_forward: non-integral output size");
  const int64_t h_out = he / stride + 1, w_out = we / stride + 1;
  Tensor out({n_batch, f, h_out, w_out}, 0.0);
  Tensor w2d = weights;
  w2d.dims = {f, c_in * k * k};
  for (int64_t n = 0; n < n_batch; ++n) {
    const Tensor cols = detail::im2col(input, n, static_cast<int>(c_in), static_cast<int>(h_in),
                                       static_cast<int>(w_in), static_cast<int>(k), stride, pad,
                                       static_cast<int>(h_out), static_cast<int>(w_out));
    const Tensor prod = matmul(w2d, cols);  // f x (h_out*w_out)
    double* dst = out.data.data() + n * f * h_out * w_out;
    for (int64_t fi = 0; fi < f; ++fi) {
      const double b = bias.at(fi);
      const double* src = prod.data.data() + fi * h_out * w_out;
      for (int64_t q = 0; q < h_out * w_out; ++q) dst[fi * h_out * w_out + q] = src[q] + b;
    }
  }
  return out;
}

struct ConvGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

inline ConvGrads conv_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                               int stride, int pad) {
  const int64_t n_batch = input.dims[0], c_in = input.dims[1], h_in = input.dims[2],
                w_in = input.dims[3];
  const int64_t f = weights.dims[0], k = weights.dims[2];
  const int64_t h_out = grad_out.dims[2], w_out = grad_out.dims[3];
  ConvGrads g;
  g.input = Tensor(input.dims, 0.0);
  g.weights = Tensor(weights.dims, 0.0);
  g.bias = Tensor({f}, 0.0);
  Tensor w2d = weights;
  w2d.dims = {f, c_in * k * k};
  const Tensor w2d_t = detail::transpose2d(w2d);
  Tensor gw2d({f, c_in * k * k}, 0.0);
  for (int64_t n = 0; n < n_batch; ++n) {
    Tensor dout2d({f, h_out * w_out}, 0.0);
    std::copy(grad_out.data.begin() + n * f * h_out * w_out,
              grad_out.data.begin() + (n + 1) * f * h_out * w_out, dout2d.data.begin());
    const Tensor cols = detail::im2col(input, n, static_cast<int>(c_in), static_cast<int>(h_in),
                                       static_cast<int>(w_in), static_cast<int>(k), stride, pad,
                                       static_cast<int>(h_out), static_cast<int>(w_out));
    const Tensor gw_n = matmul(dout2d, detail::transpose2d(cols));
    for (size_t q = 0; q < gw2d.data.size(); ++q) gw2d.data[q] += gw_n.data[q];
    const Tensor gcols = matmul(w2d_t, dout2d);
    detail::col2im_add(gcols, g.input.data.data() + n * c_in * h_in * w_in, static_cast<int>(c_in),
                       static_cast<int>(h_in), static_cast<int>(w_in), static_cast<int>(k), stride,
                       pad, static_cast<int>(h_out), static_cast<int>(w_out));
    for (int64_t fi = 0; fi < f; ++fi)
      for (int64_t q = 0; q < h_out * w_out; ++q) g.bias.at(fi) += dout2d.at(fi, q);
  }
  std::copy(gw2d.data.begin(), gw2d.data.end(), g.weights.data.begin());
  return g;
}

/// Windowed max; argmax records the flat input index, first occurrence
/// winning ties so backward routing is deterministic.
inline Tensor maxpool_forward(const Tensor& input, int kernel, int stride,
                              std::vector<int64_t>* argmax = nullptr) {
  if (input.rank() != 4) throw ShapeError("maxpool_forward: expected rank-4 input");
  const int64_t n_batch = input.dims[0], c = input.dims[1], h_in = input.dims[2],
                w_in = input.dims[3];
  if (kernel > h_in || kernel > w_in)
    throw ShapeError("maxpool_forward: kernel " + std::to_string(kernel) + " exceeds input " +
                     std::to_string(h_in) + "x" + std::to_string(w_in));
  const int64_t he = h_in - kernel, we = w_in - kernel;
  if (he % stride != 0 || we % stride != 0)
    throw ShapeError("maxpool_forward: non-integral output size");
  const int64_t h_out = he / stride + 1, w_out = we / stride + 1;
  Tensor out({n_batch, c, h_out, w_out}, 0.0);
  if (argmax) argmax->assign(static_cast<size_t>(out.numel()), 0);
  const double* in = input.data.data();
  int64_t oi = 0;
  for (int64_t n = 0; n < n_batch; ++n) {
    for (int64_t ci = 0; ci < c; ++ci) {
      const int64_t base = (n * c + ci) * h_in * w_in;
      for (int64_t i = 0; i < h_out; ++i) {
        for (int64_t j = 0; j < w_out; ++j, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          int64_t best_idx = 0;
          for (int64_t u = 0; u < kernel; ++u) {
            for (int64_t v = 0; v < kernel; ++v) {
              const int64_t idx = base + (i * stride + u) * w_in + (j * stride + v);
              if (in[idx] > best) {
                best = in[idx];
                best_idx = idx;
              }
            }
          }
          out.data[static_cast<size_t>(oi)] = best;
          if (argmax) (*argmax)[static_cast<size_t>(oi)] = best_idx;
        }
      }
    }
  }
  return out;
}

inline Tensor maxpool_backward(const Tensor& grad_out, const std::vector<int64_t>& argmax,
                               const std::vector<int64_t>& input_dims) {
  Tensor g(input_dims, 0.0);
  for (size_t i = 0; i < argmax.size(); ++i)
    g.data[static_cast<size_t>(argmax[i])] += grad_out.data[i];
  return g;
}

inline Tensor relu_forward(const Tensor& input) {
  Tensor out = input;
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

/// Gradient at exactly 0 is 0.
inline Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  Tensor g = grad_out;
  for (size_t i = 0; i < g.data.size(); ++i)
    if (input.data[i] <= 0.0) g.data[i] = 0.0;
  return g;
}

inline Tensor inner_product_forward(const Tensor& input2d, const Tensor& weights,
                                    const Tensor& bias) {
  if (input2d.rank() != 2 || weights.rank() != 2)
    throw ShapeError("inner_product_forward: expected rank-2 input and weights");
  if (input2d.dims[1] != weights.dims[0])
    throw ShapeError("inner_product_forward: input width " + std::to_string(input2d.dims[1]) +
                     " != weight rows " + std::to_string(weights.dims[0]));
  if (bias.rank() != 1 || bias.dims[0] != weights.dims[1])
    throw ShapeError("inner_product_forward: bad bias dims");
  Tensor out = matmul(input2d, weights);
  for (int64_t n = 0; n < out.dims[0]; ++n)
    for (int64_t u = 0; u < out.dims[1]; ++u) out.at(n, u) += bias.at(u);
  return out;
}

struct InnerProductGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

inline InnerProductGrads inner_product_backward(const Tensor& input2d, const Tensor& weights,
                                                const Tensor& grad_out) {
  InnerProductGrads g;
  g.input = matmul(grad_out, detail::transpose2d(weights));
  g.weights = matmul(detail::transpose2d(input2d), grad_out);
  g.bias = Tensor({weights.dims[1]}, 0.0);
  for (int64_t n = 0; n < grad_out.dims[0]; ++n)
    for (int64_t u = 0; u < grad_out.dims[1]; ++u) g.bias.at(u) += grad_out.at(n, u);
  return g;
}

enum class NetMode { Train, Infer };

/// Inverted dropout: each element zeroed with probability `rate`, survivors
/// scaled by 1/(1-rate); inference is the bitwise identity. The mask (scale
/// factors) is written to *mask_out for the backward pass.
inline Tensor dropout_forward(const Tensor& input, double rate, NetMode mode, SeededRng* rng,
                              Tensor* mask_out = nullptr) {
  if (rate < 0.0 || rate >= 1.0) throw ParamError("dropout: rate must be in [0,1)");
  if (mode == NetMode::Infer || rate == 0.0) {
    if (mask_out) *mask_out = Tensor();
    return input;
  }
  if (!rng) throw ParamError("dropout: training mode needs an rng");
  Tensor mask(input.dims, 0.0);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (auto& m : mask.data) m = rng->uniform() < rate ? 0.0 : keep_scale;
  Tensor out = input;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask.data[i];
  if (mask_out) *mask_out = std::move(mask);
  return out;
}

inline Tensor dropout_backward(const Tensor& grad_out, const Tensor& mask) {
  if (mask.numel() == 0) return grad_out;  // identity pass
  Tensor g = grad_out;
  for (size_t i = 0; i < g.data.size(); ++i) g.data[i] *= mask.data[i];
  return g;
}

/// Row-stabilized softmax: p[i][k] = exp(z[i][k] - max_k z[i]) / sum.
inline Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax: expected rank-2 logits");
  if (logits.dims[1] < 2) throw ShapeError("softmax: need at least 2 classes");
  Tensor out = logits;
  for (int64_t n = 0; n < logits.dims[0]; ++n) {
    double mx = logits.at(n, 0);
    for (int64_t k = 1; k < logits.dims[1]; ++k) mx = std::max(mx, logits.at(n, k));
    double sum = 0.0;
    for (int64_t k = 0; k < logits.dims[1]; ++k) {
      const double e = std::exp(logits.at(n, k) - mx);
      out.at(n, k) = e;
      sum += e;
    }
    for (int64_t k = 0; k < logits.dims[1]; ++k) out.at(n, k) /= sum;
  }
  return out;
}

/// Mean negative log-likelihood with p clamped at 1e-12 inside the log, and
/// the combined softmax+loss gradient (p - onehot)/N with respect to logits.
inline std::pair<double, Tensor> cross_entropy_loss(const Tensor& probs,
                                                    const std::vector<int>& labels) {
  if (probs.rank() != 2) throw ShapeError("cross_entropy_loss: expected rank-2 probabilities");
  const int64_t n = probs.dims[0], k = probs.dims[1];
  if (static_cast<int64_t>(labels.size()) != n)
    throw ShapeError("cross_entropy_loss: label count mismatch");
  Tensor grad(probs.dims, 0.0);
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw LabelError("cross_entropy_loss: label " + std::to_string(labels[i]) +
                       " out of range at row " + std::to_string(i));
    loss -= std::log(std::max(probs.at(i, labels[i]), 1e-12));
    for (int64_t j = 0; j < k; ++j)
      grad.at(i, j) = (probs.at(i, j) - (j == labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
  }
  return {loss / static_cast<double>(n), grad};
}

/// Fraction of rows whose argmax (lowest index wins ties) matches the label.
inline double accuracy(const Tensor& probs, const std::vector<int>& labels) {
  if (probs.rank() != 2) throw ShapeError("accuracy: expected rank-2 input");
  const int64_t n = probs.dims[0], k = probs.dims[1];
  if (static_cast<int64_t>(labels.size()) != n) throw ShapeError("accuracy: label count mismatch");
  if (n == 0) return 0.0;
  int64_t correct = 0;
  for (int64_t i = 0; i < n; ++i) {
    int best = 0;
    for (int64_t j = 1; j < k; ++j)
      if (probs.at(i, j) > probs.at(i, best)) best = static_cast<int>(j);
    if (best == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

inline std::vector<int> argmax_rows(const Tensor& probs) {
  std::vector<int> out(static_cast<size_t>(probs.dims[0]));
  for (int64_t i = 0; i < probs.dims[0]; ++i) {
    int best = 0;
    for (int64_t j = 1; j < probs.dims[1]; ++j)
      if (probs.at(i, j) > probs.at(i, best)) best = static_cast<int>(j);
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Architecture builders
// ---------------------------------------------------------------------------

/// LeNet-style stack: conv(20,5x5) pool(2,2) conv(50,5x5) pool(2,2)
/// ip(500) relu ip(K) softmax.
inline NetworkSpec build_emex(int in_c, int in_h, int in_w, int num_classes) {
  if (num_classes < 2) throw ParamError("build_emex: need at least 2 classes");
  if (in_h < 16 || in_w < 16)
    throw ShapeError("build_emex: input " + std::to_string(in_h) + "x" + std::to_string(in_w) +
                     " below 16x16");
  NetworkSpec spec;
  spec.in_c = in_c;
  spec.in_h = in_h;
  spec.in_w = in_w;
  spec.num_classes = num_classes;
  spec.layers = {
      LayerSpec::conv(20, 5),       LayerSpec::max_pool(2, 2), LayerSpec::conv(50, 5),
      LayerSpec::max_pool(2, 2),    LayerSpec::inner_product(500), LayerSpec::relu(),
      LayerSpec::inner_product(num_classes), LayerSpec::softmax(),
  };
  infer_activation_shapes(spec);
  return spec;
}

/// Five convolutions with max-pools after the first, second and fifth, then
/// three inner products with dropout(0.5) after the first two. Channel and
/// unit counts shrink by width_scale (floor 8) so the stack trains at desk
/// scale; spatial geometry is 5x5 pad-2 for the first two convolutions and
/// 3x3 pad-1 for the rest, with 2x2 stride-2 pools (input sides must be
/// divisible by 8).
inline NetworkSpec build_alexnet_mini(int in_c, int in_h, int in_w, int num_classes,
                                      double width_scale) {
  if (width_scale <= 0.0 || width_scale > 1.0)
    throw ParamError("build_alexnet_mini: width_scale must be in (0,1]");
  if (num_classes < 2) throw ParamError("build_alexnet_mini: need at least 2 classes");
  auto scaled = [&](int full) {
    return std::max<int64_t>(8, std::lround(width_scale * full));
  };
  const int c1 = static_cast<int>(scaled(96)), c2 = static_cast<int>(scaled(256)),
            c3 = static_cast<int>(scaled(384)), c4 = static_cast<int>(scaled(384)),
            c5 = static_cast<int>(scaled(256));
  const int f1 = static_cast<int>(scaled(4096)), f2 = static_cast<int>(scaled(4096));
  NetworkSpec spec;
  spec.in_c = in_c;
  spec.in_h = in_h;
  spec.in_w = in_w;
  spec.num_classes = num_classes;
  spec.layers = {
      LayerSpec::conv(c1, 5, 1, 2), LayerSpec::relu(), LayerSpec::max_pool(2, 2),
      LayerSpec::conv(c2, 5, 1, 2), LayerSpec::relu(), LayerSpec::max_pool(2, 2),
      LayerSpec::conv(c3, 3, 1, 1), LayerSpec::relu(),
      LayerSpec::conv(c4, 3, 1, 1), LayerSpec::relu(),
      LayerSpec::conv(c5, 3, 1, 1), LayerSpec::relu(), LayerSpec::max_pool(2, 2),
      LayerSpec::inner_product(f1), LayerSpec::relu(), LayerSpec::dropout(0.5),
      LayerSpec::inner_product(f2), LayerSpec::relu(), LayerSpec::dropout(0.5),
      LayerSpec::inner_product(num_classes), LayerSpec::softmax(),
  };
  infer_activation_shapes(spec);
  return spec;
}

// ---------------------------------------------------------------------------
// Whole-network forward / backward
// ---------------------------------------------------------------------------

struct ForwardTrace {
  std::vector<Tensor> acts;                   // acts[0] = input, acts[i+1] = layer i output
  std::vector<std::vector<int64_t>> argmax;   // per layer, pools only
  std::vector<Tensor> masks;                  // per layer, dropout only
};

inline ForwardTrace net_forward(const NetworkSpec& spec, const NetworkState& state,
                                const Tensor& batch, NetMode mode, SeededRng* rng = nullptr) {
  if (batch.rank() != 4 || batch.dims[1] != spec.in_c || batch.dims[2] != spec.in_h ||
      batch.dims[3] != spec.in_w)
    throw ShapeError("net_forward: batch dims " + dims_to_string(batch.dims) +
                     " do not match network input (" + std::to_string(spec.in_c) + "," +
                     std::to_string(spec.in_h) + "," + std::to_string(spec.in_w) + ")");
  ForwardTrace trace;
  trace.acts.reserve(spec.layers.size() + 1);
  trace.acts.push_back(batch);
  trace.argmax.resize(spec.layers.size());
  trace.masks.resize(spec.layers.size());
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const Tensor& x = trace.acts.back();
    try {
      switch (l.kind) {
        case LayerKind::Convolution:
          trace.acts.push_back(conv_forward(x, state.weights[i], state.biases[i], l.stride, l.pad));
          break;
        case LayerKind::MaxPool:
          trace.acts.push_back(maxpool_forward(x, l.kernel, l.stride, &trace.argmax[i]));
          break;
        case LayerKind::Relu:
          trace.acts.push_back(relu_forward(x));
          break;
        case LayerKind::InnerProduct: {
          Tensor flat = x;
          flat.dims = {x.dims[0], x.numel() / x.dims[0]};
          trace.acts.push_back(inner_product_forward(flat, state.weights[i], state.biases[i]));
          break;
        }
        case LayerKind::Dropout:
          trace.acts.push_back(dropout_forward(x, l.rate, mode, rng, &trace.masks[i]));
          break;
        case LayerKind::Softmax: {
          Tensor flat = x;
          flat.dims = {x.dims[0], x.numel() / x.dims[0]};
          trace.acts.push_back(softmax(flat));
          break;
        }
      }
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) +
                       "): " + e.what());
    }
  }
  return trace;
}

struct Gradients {
  std::vector<Tensor> weights;  // indexed by layer, empty where no parameters
  std::vector<Tensor> biases;
  Tensor input;
};

/// Walks layers in reverse, consuming the recorded trace. loss_grad is the
/// gradient with respect to the final softmax layer's input: cross-entropy
/// hands back the combined softmax+loss gradient, so the softmax layer itself
/// passes it through untouched (it is only valid as the terminal layer).
inline Gradients net_backward(const NetworkSpec& spec, const NetworkState& state,
                              const ForwardTrace& trace, const Tensor& loss_grad) {
  Gradients grads;
  grads.weights.resize(spec.layers.size());
  grads.biases.resize(spec.layers.size());
  Tensor cur = loss_grad;
  for (size_t ri = spec.layers.size(); ri-- > 0;) {
    const LayerSpec& l = spec.layers[ri];
    const Tensor& x = trace.acts[ri];
    switch (l.kind) {
      case LayerKind::Softmax:
        break;  // combined with cross-entropy
      case LayerKind::Convolution: {
        ConvGrads g = conv_backward(x, state.weights[ri], cur, l.stride, l.pad);
        grads.weights[ri] = std::move(g.weights);
        grads.biases[ri] = std::move(g.bias);
        cur = std::move(g.input);
        break;
      }
      case LayerKind::MaxPool:
        cur = maxpool_backward(cur, trace.argmax[ri], x.dims);
        break;
      case LayerKind::Relu:
        cur = relu_backward(x, cur);
        break;
      case LayerKind::InnerProduct: {
        Tensor flat = x;
        flat.dims = {x.dims[0], x.numel() / x.dims[0]};
        InnerProductGrads g = inner_product_backward(flat, state.weights[ri], cur);
        grads.weights[ri] = std::move(g.weights);
        grads.biases[ri] = std::move(g.bias);
        cur = std::move(g.input);
        cur.dims = x.dims;  // restore the spatial shape for the layer below
        break;
      }
      case LayerKind::Dropout:
        cur = dropout_backward(cur, trace.masks[ri]);
        break;
    }
  }
  grads.input = std::move(cur);
  return grads;
}

}  // namespace emorec
