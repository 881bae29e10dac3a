#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "errors.hpp"

namespace emorec {

/// Dense row-major tensor of doubles, rank 1-4. Activations use the
/// N x C x H x W convention with the batch outermost.
struct Tensor {
  std::vector<int64_t> dims;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int64_t> d, double fill) : dims(std::move(d)) {
    data.assign(static_cast<size_t>(numel_of(dims)), fill);
  }

  static int64_t numel_of(const std::vector<int64_t>& d) {
    int64_t n = 1;
    for (int64_t v : d) n *= v;
    return n;
  }

  int rank() const { return static_cast<int>(dims.size()); }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }

  double& at(int64_t i) { return data[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return data[static_cast<size_t>(i)]; }
  double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * dims[1] + j)]; }
  double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * dims[1] + j)]; }
  double& at(int64_t i, int64_t j, int64_t k) {
    return data[static_cast<size_t>((i * dims[1] + j) * dims[2] + k)];
  }
  double at(int64_t i, int64_t j, int64_t k) const {
    return data[static_cast<size_t>((i * dims[1] + j) * dims[2] + k)];
  }
  double& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data[static_cast<size_t>(((i * dims[1] + j) * dims[2] + k) * dims[3] + l)];
  }
  double at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data[static_cast<size_t>(((i * dims[1] + j) * dims[2] + k) * dims[3] + l)];
  }

  bool same_dims(const Tensor& other) const { return dims == other.dims; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }
};

inline std::string dims_to_string(const std::vector<int64_t>& dims) {
  std::string s = "[";
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

inline Tensor tensor_new(const std::vector<int64_t>& dims, double fill) {
  if (dims.empty() || dims.size() > 4)
    throw ShapeError("tensor_new: rank must be 1-4, got " + std::to_string(dims.size()));
  for (int64_t d : dims)
    if (d < 1) throw ShapeError("tensor_new: non-positive dim in " + dims_to_string(dims));
  return Tensor(dims, fill);
}

/// c[i][j] = sum_k a[i][k] * b[k][j]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected rank-2 operands, got " + dims_to_string(a.dims) +
                     " x " + dims_to_string(b.dims));
  if (a.dims[1] != b.dims[0])
    throw ShapeError("matmul: inner dims disagree, " + dims_to_string(a.dims) + " x " +
                     dims_to_string(b.dims));
  const int64_t m = a.dims[0], k = a.dims[1], n = b.dims[0] ? b.dims[1] : 0;
  Tensor c({m, n}, 0.0);
  const double* pa = a.data.data();
  const double* pb = b.data.data();
  double* pc = c.data.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      double* crow = pc + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// Deterministic pseudo-random stream. The algorithm is pinned so runs
/// reproduce across platforms and languages:
///   state  = splitmix64(seed)        (one mixing step; 0 remapped to a constant)
///   next   = xorshift64* : s ^= s>>12; s ^= s<<25; s ^= s>>27; return s * 2685821657736338717
///   uniform = top 53 bits / 2^53, in [0,1)
struct SeededRng {
  uint64_t state;

  explicit SeededRng(uint64_t seed) {
    uint64_t z = seed + 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    state = z ^ (z >> 31);
    if (state == 0) state = 0x9E3779B97F4A7C15ULL;
  }

  uint64_t next_u64() {
    uint64_t s = state;
    s ^= s >> 12;
    s ^= s << 25;
    s ^= s >> 27;
    state = s;
    return s * 2685821657736338717ULL;
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
};

inline std::vector<double> rng_uniform(SeededRng& rng, int64_t n) {
  if (n < 0) throw ParamError("rng_uniform: negative count");
  std::vector<double> out(static_cast<size_t>(n));
  for (auto& v : out) v = rng.uniform();
  return out;
}

/// Standard normals via Box-Muller. Values are produced in pairs; the unused
/// half of an odd-length request is discarded, so the draw count from the
/// underlying stream is 2*ceil(n/2).
inline std::vector<double> rng_normal(SeededRng& rng, int64_t n) {
  if (n < 0) throw ParamError("rng_normal: negative count");
  std::vector<double> out(static_cast<size_t>(n));
  constexpr double two_pi = 6.283185307179586476925286766559;
  for (int64_t i = 0; i < n; i += 2) {
    const double u1 = 1.0 - rng.uniform();  // (0,1], keeps log() finite
    const double u2 = rng.uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    out[static_cast<size_t>(i)] = r * std::cos(two_pi * u2);
    if (i + 1 < n) out[static_cast<size_t>(i + 1)] = r * std::sin(two_pi * u2);
  }
  return out;
}

/// Fisher-Yates, index drawn as floor(uniform() * (i + 1)).
template <class T>
void rng_shuffle(SeededRng& rng, std::vector<T>& items) {
  for (int64_t i = static_cast<int64_t>(items.size()) - 1; i > 0; --i) {
    int64_t j = static_cast<int64_t>(rng.uniform() * static_cast<double>(i + 1));
    if (j > i) j = i;
    std::swap(items[static_cast<size_t>(i)], items[static_cast<size_t>(j)]);
  }
}

}  // namespace emorec
