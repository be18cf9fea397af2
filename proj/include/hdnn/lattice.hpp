#pragma once

// Frame-synchronous hypothesis lattices and the state-level minimum Bayes
// risk (sMBR) objective over them.
//
// Every arc spans exactly one frame and carries an HMM state id and a
// language-model log score. A path's log score is
//     Σ_arcs k · log y[t, state] + lm_logscore
// and its posterior is the softmax of that score over all complete paths.
// The objective minimised is T − E[A], where A counts frames whose arc state
// matches the reference.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "hdnn/errors.hpp"
#include "hdnn/losses.hpp"
#include "hdnn/matrix.hpp"

namespace hdnn {

struct LatticeArc {
  std::size_t from = 0;
  std::size_t to = 0;
  std::size_t state = 0;
  double lm_logscore = 0.0;

  friend bool operator==(const LatticeArc&, const LatticeArc&) = default;
};

/// Reference state sequence, one state id per frame.
using ReferencePath = std::vector<std::size_t>;

/// Node 0 is the start node (time 0); node num_nodes-1 is the final node
/// (time num_frames). Construction validates the structure and derives node
/// times, so every Lattice instance is a well-formed frame lattice.
class Lattice {
 public:
  Lattice(std::size_t num_frames, std::size_t num_nodes, std::vector<LatticeArc> arcs)
      : num_frames_(num_frames), num_nodes_(num_nodes), arcs_(std::move(arcs)) {
    validate();
  }

  std::size_t num_frames() const { return num_frames_; }
  std::size_t num_nodes() const { return num_nodes_; }
  std::size_t start() const { return 0; }
  std::size_t final_node() const { return num_nodes_ - 1; }
  std::span<const LatticeArc> arcs() const { return arcs_; }
  const LatticeArc& arc(std::size_t i) const { return arcs_[i]; }
  std::size_t node_time(std::size_t node) const { return node_time_[node]; }
  /// Frame index covered by arc i.
  std::size_t arc_frame(std::size_t i) const { return node_time_[arcs_[i].from]; }
  /// Arc indices sorted by frame (stable within a frame).
  std::span<const std::size_t> arcs_by_time() const { return order_; }

  std::size_t max_state() const {
    std::size_t m = 0;
    for (const auto& a : arcs_) m = std::max(m, a.state);
    return m;
  }

  friend bool operator==(const Lattice& a, const Lattice& b) {
    return a.num_frames_ == b.num_frames_ && a.num_nodes_ == b.num_nodes_ && a.arcs_ == b.arcs_;
  }

 private:
  void validate() {
    if (num_frames_ == 0) throw StructuralError("lattice: num_frames must be positive");
    if (num_nodes_ < 2) throw StructuralError("lattice: need at least a start and a final node");
    if (arcs_.empty()) throw StructuralError("lattice: no arcs");
    constexpr std::size_t kUnset = std::numeric_limits<std::size_t>::max();

    std::vector<std::vector<std::size_t>> out(num_nodes_);
    std::vector<std::vector<std::size_t>> in(num_nodes_);
    for (std::size_t i = 0; i < arcs_.size(); ++i) {
      const auto& a = arcs_[i];
      if (a.from >= num_nodes_ || a.to >= num_nodes_) {
        throw StructuralError("lattice: arc " + std::to_string(i) + " references a missing node");
      }
      if (!std::isfinite(a.lm_logscore)) {
        throw StructuralError("lattice: arc " + std::to_string(i) + " has a non-finite lm score");
      }
      out[a.from].push_back(i);
      in[a.to].push_back(i);
    }

    node_time_.assign(num_nodes_, kUnset);
    node_time_[0] = 0;
    std::queue<std::size_t> pending;
    pending.push(0);
    while (!pending.empty()) {
      const std::size_t n = pending.front();
      pending.pop();
      for (std::size_t i : out[n]) {
        const std::size_t t = node_time_[n] + 1;
        const std::size_t to = arcs_[i].to;
        if (node_time_[to] == kUnset) {
          node_time_[to] = t;
          pending.push(to);
        } else if (node_time_[to] != t) {
          throw StructuralError("lattice: node " + std::to_string(to) +
                                " is reached at two different times");
        }
      }
    }
    for (std::size_t n = 0; n < num_nodes_; ++n) {
      if (node_time_[n] == kUnset) {
        throw StructuralError("lattice: node " + std::to_string(n) + " is unreachable from the start");
      }
      if (node_time_[n] > num_frames_) {
        throw StructuralError("lattice: node " + std::to_string(n) + " lies beyond the last frame");
      }
    }
    if (!in[0].empty()) throw StructuralError("lattice: start node has incoming arcs");
    if (node_time_[final_node()] != num_frames_) {
      throw StructuralError("lattice: final node is at time " + std::to_string(node_time_[final_node()]) +
                            ", expected " + std::to_string(num_frames_));
    }

    std::vector<bool> coreachable(num_nodes_, false);
    coreachable[final_node()] = true;
    pending.push(final_node());
    while (!pending.empty()) {
      const std::size_t n = pending.front();
      pending.pop();
      for (std::size_t i : in[n]) {
        if (!coreachable[arcs_[i].from]) {
          coreachable[arcs_[i].from] = true;
          pending.push(arcs_[i].from);
        }
      }
    }
    for (std::size_t n = 0; n < num_nodes_; ++n) {
      if (!coreachable[n]) {
        throw StructuralError("lattice: node " + std::to_string(n) + " cannot reach the final node");
      }
    }

    order_.resize(arcs_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    std::stable_sort(order_.begin(), order_.end(),
                     [&](std::size_t a, std::size_t b) { return arc_frame(a) < arc_frame(b); });
  }

  std::size_t num_frames_;
  std::size_t num_nodes_;
  std::vector<LatticeArc> arcs_;
  std::vector<std::size_t> node_time_;
  std::vector<std::size_t> order_;
};

struct SmbrResult {
  /// Posterior-weighted number of frames matching the reference, in [0, T].
  double expected_accuracy = 0.0;
  /// T − expected_accuracy.
  double loss = 0.0;
  /// d loss / d log y[t, s], T×J.
  Matrix dlog_posteriors;
  /// Occupation posterior of every arc (same order as Lattice::arcs()).
  std::vector<double> arc_posteriors;
  /// log Σ_paths exp(score).
  double log_partition = 0.0;
};

namespace detail {

inline void check_scoring_inputs(const Lattice& lat, const Matrix& log_posteriors, double acoustic_scale) {
  if (log_posteriors.rows() != lat.num_frames()) {
    throw ConsistencyError("lattice has " + std::to_string(lat.num_frames()) + " frames but log posteriors have " +
                           std::to_string(log_posteriors.rows()) + " rows");
  }
  if (lat.max_state() >= log_posteriors.cols()) {
    throw ConsistencyError("lattice state " + std::to_string(lat.max_state()) + " outside " +
                           std::to_string(log_posteriors.cols()) + " posterior columns");
  }
  if (!(acoustic_scale >= 0.0) || !std::isfinite(acoustic_scale)) {
    throw ParameterError("acoustic scale must be finite and nonnegative");
  }
}

inline void check_reference(const Lattice& lat, const ReferencePath& reference) {
  if (reference.size() != lat.num_frames()) {
    throw StructuralError("reference has " + std::to_string(reference.size()) + " states for a " +
                          std::to_string(lat.num_frames()) + "-frame lattice");
  }
}

inline double arc_score(const Lattice& lat, std::size_t i, const Matrix& log_posteriors, double k) {
  const auto& a = lat.arc(i);
  return k * log_posteriors(lat.arc_frame(i), a.state) + a.lm_logscore;
}

}  // namespace detail

/// Log score of a complete path given as a sequence of arc indices.
inline double path_score(const Lattice& lat, std::span<const std::size_t> path, const Matrix& log_posteriors,
                         double acoustic_scale) {
  detail::check_scoring_inputs(lat, log_posteriors, acoustic_scale);
  if (path.size() != lat.num_frames()) {
    throw StructuralError("path has " + std::to_string(path.size()) + " arcs, lattice has " +
                          std::to_string(lat.num_frames()) + " frames");
  }
  std::size_t node = lat.start();
  double score = 0.0;
  for (std::size_t i : path) {
    if (i >= lat.arcs().size() || lat.arc(i).from != node) {
      throw StructuralError("path is not a connected start-to-final arc sequence");
    }
    score += detail::arc_score(lat, i, log_posteriors, acoustic_scale);
    node = lat.arc(i).to;
  }
  if (node != lat.final_node()) throw StructuralError("path does not end at the final node");
  return score;
}

/// Number of frames on which the path's states equal the reference.
inline double path_accuracy(const Lattice& lat, std::span<const std::size_t> path, const ReferencePath& reference) {
  double acc = 0.0;
  for (std::size_t i : path) {
    if (lat.arc(i).state == reference[lat.arc_frame(i)]) acc += 1.0;
  }
  return acc;
}

/// Log-domain forward-backward computing E[A] and its gradient without
/// enumerating paths. For arc a with occupation γ_a and mean accuracy Ā_a of
/// the paths through it,
///     d loss / d log y[t, s] = −k Σ_{a at t, state s} γ_a (Ā_a − E[A]).
inline SmbrResult smbr_forward_backward(const Lattice& lat, const ReferencePath& reference,
                                        const Matrix& log_posteriors, double acoustic_scale) {
  detail::check_scoring_inputs(lat, log_posteriors, acoustic_scale);
  detail::check_reference(lat, reference);
  const std::size_t num_nodes = lat.num_nodes();
  const auto order = lat.arcs_by_time();
  const auto& arcs = lat.arcs();

  std::vector<double> scores(arcs.size());
  std::vector<double> accuracy(arcs.size());
  for (std::size_t i = 0; i < arcs.size(); ++i) {
    scores[i] = detail::arc_score(lat, i, log_posteriors, acoustic_scale);
    accuracy[i] = arcs[i].state == reference[lat.arc_frame(i)] ? 1.0 : 0.0;
  }

  // alpha: log mass of partial paths start→node; alpha_acc: their mean accuracy.
  std::vector<double> alpha(num_nodes, -INFINITY);
  std::vector<double> alpha_acc(num_nodes, 0.0);
  alpha[lat.start()] = 0.0;
  for (std::size_t i : order) alpha[arcs[i].to] = log_add(alpha[arcs[i].to], alpha[arcs[i].from] + scores[i]);
  for (std::size_t i : order) {
    const auto& a = arcs[i];
    const double w = std::exp(alpha[a.from] + scores[i] - alpha[a.to]);
    alpha_acc[a.to] += w * (alpha_acc[a.from] + accuracy[i]);
  }

  std::vector<double> beta(num_nodes, -INFINITY);
  std::vector<double> beta_acc(num_nodes, 0.0);
  beta[lat.final_node()] = 0.0;
  for (std::size_t r = order.size(); r-- > 0;) {
    const auto& a = arcs[order[r]];
    beta[a.from] = log_add(beta[a.from], beta[a.to] + scores[order[r]]);
  }
  for (std::size_t r = order.size(); r-- > 0;) {
    const std::size_t i = order[r];
    const auto& a = arcs[i];
    const double w = std::exp(beta[a.to] + scores[i] - beta[a.from]);
    beta_acc[a.from] += w * (beta_acc[a.to] + accuracy[i]);
  }

  const double log_z = alpha[lat.final_node()];
  if (!std::isfinite(log_z)) throw StructuralError("lattice has no path with finite score");

  SmbrResult result;
  result.log_partition = log_z;
  result.expected_accuracy = alpha_acc[lat.final_node()];
  result.loss = static_cast<double>(lat.num_frames()) - result.expected_accuracy;
  result.dlog_posteriors = Matrix(log_posteriors.rows(), log_posteriors.cols());
  result.arc_posteriors.resize(arcs.size());
  for (std::size_t i : order) {
    const auto& a = arcs[i];
    const double gamma = std::exp(alpha[a.from] + scores[i] + beta[a.to] - log_z);
    const double mean_acc = alpha_acc[a.from] + accuracy[i] + beta_acc[a.to];
    result.arc_posteriors[i] = gamma;
    result.dlog_posteriors(lat.arc_frame(i), a.state) -=
        acoustic_scale * gamma * (mean_acc - result.expected_accuracy);
  }
  return result;
}

/// Every complete path as a sequence of arc indices, depth-first in arc order.
inline std::vector<std::vector<std::size_t>> enumerate_paths(const Lattice& lat, std::size_t max_paths) {
  std::vector<std::vector<std::size_t>> out_arcs(lat.num_nodes());
  for (std::size_t i = 0; i < lat.arcs().size(); ++i) out_arcs[lat.arc(i).from].push_back(i);

  std::vector<std::vector<std::size_t>> paths;
  std::vector<std::size_t> current;
  auto walk = [&](auto&& self, std::size_t node) -> void {
    if (node == lat.final_node()) {
      if (paths.size() >= max_paths) {
        throw CapacityError("lattice has more than " + std::to_string(max_paths) + " paths");
      }
      paths.push_back(current);
      return;
    }
    for (std::size_t i : out_arcs[node]) {
      current.push_back(i);
      self(self, lat.arc(i).to);
      current.pop_back();
    }
  };
  walk(walk, lat.start());
  return paths;
}

inline constexpr std::size_t kBruteForcePathLimit = 10000;

/// Reference implementation by explicit path enumeration. The gradient is
/// a central finite difference on each log-posterior entry (step 1e-6).
inline SmbrResult brute_force_smbr(const Lattice& lat, const ReferencePath& reference,
                                   const Matrix& log_posteriors, double acoustic_scale) {
  detail::check_scoring_inputs(lat, log_posteriors, acoustic_scale);
  detail::check_reference(lat, reference);
  const auto paths = enumerate_paths(lat, kBruteForcePathLimit);
  if (paths.empty()) throw StructuralError("lattice has no complete path");

  std::vector<double> accuracies;
  accuracies.reserve(paths.size());
  for (const auto& p : paths) accuracies.push_back(path_accuracy(lat, p, reference));

  auto expected = [&](const Matrix& lp, double* log_z_out) {
    std::vector<double> scores;
    scores.reserve(paths.size());
    for (const auto& p : paths) scores.push_back(path_score(lat, p, lp, acoustic_scale));
    const double log_z = log_sum_exp(scores);
    if (log_z_out) *log_z_out = log_z;
    double e = 0.0;
    for (std::size_t i = 0; i < paths.size(); ++i) e += std::exp(scores[i] - log_z) * accuracies[i];
    return e;
  };

  SmbrResult result;
  result.expected_accuracy = expected(log_posteriors, &result.log_partition);
  result.loss = static_cast<double>(lat.num_frames()) - result.expected_accuracy;
  result.dlog_posteriors = Matrix(log_posteriors.rows(), log_posteriors.cols());

  constexpr double kStep = 1e-6;
  Matrix probe = log_posteriors;
  for (std::size_t t = 0; t < probe.rows(); ++t) {
    for (std::size_t s = 0; s < probe.cols(); ++s) {
      const double saved = probe(t, s);
      probe(t, s) = saved + kStep;
      const double plus = expected(probe, nullptr);
      probe(t, s) = saved - kStep;
      const double minus = expected(probe, nullptr);
      probe(t, s) = saved;
      result.dlog_posteriors(t, s) = -(plus - minus) / (2.0 * kStep);
    }
  }

  result.arc_posteriors.assign(lat.arcs().size(), 0.0);
  std::vector<double> scores;
  for (const auto& p : paths) scores.push_back(path_score(lat, p, log_posteriors, acoustic_scale));
  for (std::size_t i = 0; i < paths.size(); ++i) {
    const double w = std::exp(scores[i] - result.log_partition);
    for (std::size_t a : paths[i]) result.arc_posteriors[a] += w;
  }
  return result;
}

enum class SequenceSmoothing { ce_smoothed, kl_smoothed };

struct SequenceLossResult {
  double value = 0.0;
  Matrix dlogits;
};

/// smbr.loss + p · frame_loss.value, with the sMBR gradient carried from
/// log-posteriors to logits through the log-softmax Jacobian at the given
/// temperature. `frame_loss` must be the CE (ce_smoothed) or KL (kl_smoothed)
/// loss evaluated on the same frames and posteriors.
inline SequenceLossResult regularized_sequence_loss(const SmbrResult& smbr, const LossResult& frame_loss,
                                                    const Matrix& posteriors, double temperature, double p,
                                                    SequenceSmoothing mode) {
  (void)mode;  // both modes combine identically; the caller picks the frame loss
  require_positive_temperature(temperature);
  if (!(p >= 0.0)) throw ParameterError("smoothing weight p must be nonnegative");
  const Matrix& g = smbr.dlog_posteriors;
  if (!g.same_shape(posteriors) || !frame_loss.dlogits.same_shape(posteriors)) {
    throw ConsistencyError("sequence loss: frame counts differ (sMBR " + g.shape_string() + ", frame loss " +
                           frame_loss.dlogits.shape_string() + ", posteriors " + posteriors.shape_string() + ")");
  }
  SequenceLossResult out;
  out.value = smbr.loss + p * frame_loss.value;
  out.dlogits = Matrix(g.rows(), g.cols());
  for (std::size_t t = 0; t < g.rows(); ++t) {
    double total = 0.0;
    for (double v : g.row(t)) total += v;
    for (std::size_t j = 0; j < g.cols(); ++j) {
      out.dlogits(t, j) = (g(t, j) - posteriors(t, j) * total) / temperature + p * frame_loss.dlogits(t, j);
    }
  }
  return out;
}

}  // namespace hdnn
