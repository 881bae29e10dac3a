#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "errors.hpp"

namespace emorec {

/// K x K counts indexed as cm[true_class][predicted_class].
struct ConfusionMatrix {
  int k = 0;
  std::vector<int64_t> counts;  // row-major, k*k

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int classes) : k(classes) {
    if (classes < 1) throw ParamError("ConfusionMatrix: need at least one class");
    counts.assign(static_cast<size_t>(k) * k, 0);
  }

  int64_t& at(int truth, int pred) { return counts[static_cast<size_t>(truth) * k + pred]; }
  int64_t at(int truth, int pred) const { return counts[static_cast<size_t>(truth) * k + pred]; }

  int64_t total() const {
    int64_t n = 0;
    for (int64_t c : counts) n += c;
    return n;
  }

  int64_t diagonal() const {
    int64_t n = 0;
    for (int i = 0; i < k; ++i) n += at(i, i);
    return n;
  }

  int64_t row_sum(int truth) const {
    int64_t n = 0;
    for (int j = 0; j < k; ++j) n += at(truth, j);
    return n;
  }

  int64_t col_sum(int pred) const {
    int64_t n = 0;
    for (int i = 0; i < k; ++i) n += at(i, pred);
    return n;
  }

  // entrywise sum, associative for parallel evaluation fan-out
  void merge(const ConfusionMatrix& other) {
    if (other.k != k) throw ShapeError("ConfusionMatrix::merge: class count mismatch");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  }
};

inline ConfusionMatrix confusion(const std::vector<int>& predictions,
                                 const std::vector<int>& labels, int k) {
  if (predictions.size() != labels.size())
    throw ShapeError("confusion: predictions/labels length mismatch");
  ConfusionMatrix cm(k);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw LabelError("confusion: label " + std::to_string(labels[i]) + " out of range at index " +
                       std::to_string(i));
    if (predictions[i] < 0 || predictions[i] >= k)
      throw LabelError("confusion: prediction " + std::to_string(predictions[i]) +
                       " out of range at index " + std::to_string(i));
    cm.at(labels[i], predictions[i]) += 1;
  }
  return cm;
}

inline double accuracy_of(const ConfusionMatrix& cm) {
  const int64_t total = cm.total();
  if (total == 0) throw DataError("accuracy_of: empty confusion matrix");
  return static_cast<double>(cm.diagonal()) / static_cast<double>(total);
}

/// Per-class F1 with 0 substituted whenever a denominator vanishes; this is
/// what turns an all-one-class predictor into the 0.0000 rows.
inline double f1_of_class(const ConfusionMatrix& cm, int k) {
  if (k < 0 || k >= cm.k) throw LabelError("f1_of_class: class " + std::to_string(k) + " out of range");
  const int64_t tp = cm.at(k, k);
  const int64_t pred = cm.col_sum(k);
  const int64_t truth = cm.row_sum(k);
  const double precision = pred > 0 ? static_cast<double>(tp) / static_cast<double>(pred) : 0.0;
  const double recall = truth > 0 ? static_cast<double>(tp) / static_cast<double>(truth) : 0.0;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

/// TP/FP/FN pooled over all classes. For single-label classification the
/// pooled FP and FN both equal total - trace, so this collapses to accuracy.
inline double micro_f1(const ConfusionMatrix& cm) {
  const int64_t total = cm.total();
  if (total == 0) throw DataError("micro_f1: empty confusion matrix");
  const int64_t tp = cm.diagonal();
  const int64_t fp = total - tp;
  const int64_t fn = total - tp;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

}  // namespace emorec
