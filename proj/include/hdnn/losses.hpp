#pragma once

// Frame-level objectives. Each returns the batch-mean loss together with its
// gradient with respect to the pre-temperature logits z, where the posteriors
// were produced as y = softmax(z / T).

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "hdnn/errors.hpp"
#include "hdnn/matrix.hpp"

namespace hdnn {

/// Smallest probability fed to log(); smaller values are clamped and counted.
inline constexpr double kLogFloor = 1e-300;

struct LossResult {
  double value = 0.0;
  Matrix dlogits;
  /// Number of probabilities that had to be clamped to kLogFloor.
  std::size_t floored = 0;
};

inline void require_positive_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("temperature must be positive and finite, got " + std::to_string(temperature));
  }
}

/// Row-wise softmax of logits / temperature with max subtraction.
inline Matrix softmax_temperature(const Matrix& logits, double temperature) {
  require_positive_temperature(temperature);
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto z = logits.row(r);
    auto y = out.row(r);
    double m = -INFINITY;
    for (double v : z) m = std::max(m, v / temperature);
    double sum = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      y[j] = std::exp(z[j] / temperature - m);
      sum += y[j];
    }
    for (double& v : y) v /= sum;
  }
  return out;
}

/// Row-wise log of softmax(logits / temperature), computed without forming y.
inline Matrix log_softmax_temperature(const Matrix& logits, double temperature) {
  require_positive_temperature(temperature);
  Matrix out(logits.rows(), logits.cols());
  std::vector<double> scaled(logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto z = logits.row(r);
    for (std::size_t j = 0; j < z.size(); ++j) scaled[j] = z[j] / temperature;
    const double lse = log_sum_exp(scaled);
    for (std::size_t j = 0; j < z.size(); ++j) out(r, j) = scaled[j] - lse;
  }
  return out;
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

namespace detail {

inline double floored_log(double p, std::size_t& floored) {
  if (p < kLogFloor) {
    ++floored;
    return std::log(kLogFloor);
  }
  return std::log(p);
}

inline void check_labels(const Matrix& y, std::span<const std::size_t> labels) {
  if (labels.size() != y.rows()) {
    throw ShapeError("hard targets: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(y.rows()) + " rows");
  }
  for (std::size_t label : labels) {
    if (label >= y.cols()) {
      throw DomainError("hard target " + std::to_string(label) + " outside [0, " +
                        std::to_string(y.cols()) + ")");
    }
  }
}

inline void check_soft_targets(const Matrix& y, const Matrix& soft) {
  if (!y.same_shape(soft)) {
    throw ShapeError("soft targets " + soft.shape_string() + " vs posteriors " + y.shape_string());
  }
  for (std::size_t r = 0; r < soft.rows(); ++r) {
    double sum = 0.0;
    for (double v : soft.row(r)) {
      if (v < 0.0) throw DomainError("soft target row " + std::to_string(r) + " has a negative entry");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw DomainError("soft target row " + std::to_string(r) + " sums to " + std::to_string(sum));
    }
  }
}

}  // namespace detail

/// Cross-entropy against one-hot labels: mean of -log y[label].
inline LossResult ce_loss(const Matrix& y, std::span<const std::size_t> labels, double temperature = 1.0) {
  require_positive_temperature(temperature);
  detail::check_labels(y, labels);
  LossResult out;
  out.dlogits = Matrix(y.rows(), y.cols());
  const double batch = static_cast<double>(y.rows());
  const double factor = 1.0 / (batch * temperature);
  double total = 0.0;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    total -= detail::floored_log(y(r, labels[r]), out.floored);
    for (std::size_t j = 0; j < y.cols(); ++j) {
      const double target = j == labels[r] ? 1.0 : 0.0;
      out.dlogits(r, j) = (y(r, j) - target) * factor;
    }
  }
  out.value = total / batch;
  return out;
}

/// Teacher-student loss: mean of -Σ_j ỹ_j log y_j. Teacher and student
/// posteriors are expected at the same temperature.
inline LossResult kl_loss(const Matrix& y, const Matrix& soft, double temperature = 1.0) {
  require_positive_temperature(temperature);
  detail::check_soft_targets(y, soft);
  LossResult out;
  out.dlogits = Matrix(y.rows(), y.cols());
  const double batch = static_cast<double>(y.rows());
  const double factor = 1.0 / (batch * temperature);
  double total = 0.0;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    for (std::size_t j = 0; j < y.cols(); ++j) {
      if (soft(r, j) > 0.0) total -= soft(r, j) * detail::floored_log(y(r, j), out.floored);
      out.dlogits(r, j) = (y(r, j) - soft(r, j)) * factor;
    }
  }
  out.value = total / batch;
  return out;
}

/// KL + q·CE.
inline LossResult hybrid_loss(const Matrix& y, const Matrix& soft, std::span<const std::size_t> labels,
                              double q, double temperature = 1.0) {
  if (!(q >= 0.0)) throw ParameterError("hybrid_loss: q must be nonnegative");
  LossResult kl = kl_loss(y, soft, temperature);
  const LossResult ce = ce_loss(y, labels, temperature);
  kl.value += q * ce.value;
  auto d = kl.dlogits.values();
  auto dc = ce.dlogits.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += q * dc[i];
  kl.floored += ce.floored;
  return kl;
}

inline Matrix one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  Matrix out(labels.size(), classes);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= classes) throw DomainError("one_hot: label out of range");
    out(r, labels[r]) = 1.0;
  }
  return out;
}

}  // namespace hdnn
