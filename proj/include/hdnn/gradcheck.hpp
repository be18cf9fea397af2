#pragma once

// Central finite-difference verification of backpropagated gradients for
// every training objective on small random networks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hdnn/lattice.hpp"
#include "hdnn/losses.hpp"
#include "hdnn/network.hpp"
#include "hdnn/random.hpp"
#include "hdnn/synthetic.hpp"
#include "hdnn/training.hpp"

namespace hdnn {

inline constexpr double kFiniteDifferenceStep = 1e-5;
/// Magnitude below which gradient entries are compared absolutely: central
/// differences at step 1e-5 carry ~1e-11 of rounding noise on O(1) losses.
inline constexpr double kGradientFloor = 1e-4;

inline double relative_error(double analytic, double numeric, double floor = kGradientFloor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

struct GradCheckReport {
  std::string name;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  std::size_t entries = 0;

  bool passed() const { return max_relative_error < tolerance; }
};

/// Compares `analytic` against central differences of `loss` over every
/// parameter entry.
inline GradCheckReport check_gradients(std::string name, const Parameters& params, const Gradients& analytic,
                                       const std::function<double(const Parameters&)>& loss, double tolerance,
                                       double step = kFiniteDifferenceStep) {
  GradCheckReport report{std::move(name), 0.0, tolerance, 0};
  Parameters probe = params;
  for_each_array_pair(probe, analytic, [&](ParamGroup, Matrix& theta, const Matrix& g) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double saved = theta.values()[i];
      theta.values()[i] = saved + step;
      const double plus = loss(probe);
      theta.values()[i] = saved - step;
      const double minus = loss(probe);
      theta.values()[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      report.max_relative_error = std::max(report.max_relative_error, relative_error(g.values()[i], numeric));
      ++report.entries;
    }
  });
  return report;
}

struct GradCheckCase {
  ModelConfig config;
  Parameters params;
  Matrix features;
  std::vector<std::size_t> labels;
  Matrix soft_targets;
};

/// Random highway network (H ≤ 16, L ≤ 5, J ≤ 6) and batch (B ≤ 4). The gate
/// configuration cycles with `variant` through both gates, constrained,
/// transform-only and carry-only.
inline GradCheckCase random_gradcheck_case(std::uint64_t seed, std::size_t variant) {
  Rng rng(seed);
  GradCheckCase c;
  c.config.input_dim = 2 + rng.index(5);
  c.config.hidden_dim = 2 + rng.index(15);
  c.config.num_layers = 2 + rng.index(4);
  c.config.output_dim = 2 + rng.index(5);
  c.config.architecture = Architecture::highway;
  switch (variant % 4) {
    case 0: c.config.gate = {true, true, false}; break;
    case 1: c.config.gate = {true, true, true}; break;
    case 2: c.config.gate = {true, false, false}; break;
    default: c.config.gate = {false, true, false}; break;
  }
  c.params = init_params(c.config, seed * 7919 + variant);
  for (auto& layer : c.params.hidden)
    for (double& b : layer.bias.values()) b = rng.uniform(-0.5, 0.5);
  for (double& b : c.params.output.bias.values()) b = rng.uniform(-0.5, 0.5);

  const std::size_t batch = 2 + rng.index(3);
  c.features = Matrix(batch, c.config.input_dim);
  for (double& v : c.features.values()) v = rng.normal();
  c.labels.resize(batch);
  for (auto& l : c.labels) l = rng.index(c.config.output_dim);
  Matrix teacher_logits(batch, c.config.output_dim);
  for (double& v : teacher_logits.values()) v = rng.normal(0.0, 2.0);
  c.soft_targets = softmax_temperature(teacher_logits, 1.0);
  return c;
}

inline GradCheckReport gradcheck_frame_objective(std::string name, Objective objective, double temperature, double q,
                                                 std::uint64_t seed, std::size_t variant, double tolerance = 1e-6) {
  const GradCheckCase c = random_gradcheck_case(seed, variant);
  TrainConfig tcfg;
  tcfg.objective = objective;
  tcfg.temperature = temperature;
  tcfg.q = q;
  const Matrix* soft = objective == Objective::ce ? nullptr : &c.soft_targets;
  const auto analytic = frame_batch_objective(c.params, c.config, tcfg, c.features, c.labels, soft);
  return check_gradients(
      std::move(name), c.params, analytic.grads,
      [&](const Parameters& p) { return frame_batch_objective(p, c.config, tcfg, c.features, c.labels, soft).loss; },
      tolerance);
}

inline GradCheckReport gradcheck_sequence_objective(std::string name, Objective objective, double p,
                                                    std::uint64_t seed, std::size_t variant, double tolerance = 1e-5) {
  const GradCheckCase c = random_gradcheck_case(seed, variant);
  Rng rng(seed ^ 0x5bd1e995ULL);
  const std::size_t frames = c.features.rows();
  Utterance utt{c.features, c.labels,
                random_lattice(frames, c.config.output_dim, 2, 3, rng)};
  TrainConfig tcfg;
  tcfg.objective = objective;
  tcfg.p = p;
  const Matrix* soft = objective == Objective::smbr_kl ? &c.soft_targets : nullptr;
  const auto analytic = sequence_utterance_objective(c.params, c.config, tcfg, utt, soft);
  return check_gradients(
      std::move(name), c.params, analytic.grads,
      [&](const Parameters& params) {
        return sequence_utterance_objective(params, c.config, tcfg, utt, soft, false).loss;
      },
      tolerance);
}

/// The full suite: CE; KL at T ∈ {1,2,3}; hybrid at q ∈ {0, 0.2, 1}; sMBR
/// with p ∈ {0, 0.2, 0.5} under CE and KL smoothing. Each objective is
/// checked on `repeats` random networks covering the gate variants.
inline std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed, std::size_t repeats = 4) {
  std::vector<GradCheckReport> out;
  auto fmt = [](double v) {
    std::string s = std::to_string(v);
    s.erase(s.find_last_not_of('0') + 1);
    if (s.back() == '.') s.pop_back();
    return s;
  };
  std::uint64_t case_seed = seed * 1000003;
  for (std::size_t r = 0; r < repeats; ++r) {
    out.push_back(gradcheck_frame_objective("ce", Objective::ce, 1.0, 0.0, ++case_seed, r));
    for (double t : {1.0, 2.0, 3.0}) {
      out.push_back(gradcheck_frame_objective("kl T=" + fmt(t), Objective::kd, t, 0.0, ++case_seed, r));
    }
    for (double q : {0.0, 0.2, 1.0}) {
      out.push_back(gradcheck_frame_objective("hybrid q=" + fmt(q), Objective::hybrid, 1.0, q, ++case_seed, r));
    }
    for (double p : {0.0, 0.2, 0.5}) {
      out.push_back(gradcheck_sequence_objective("smbr_ce p=" + fmt(p), Objective::smbr_ce, p, ++case_seed, r));
      out.push_back(gradcheck_sequence_objective("smbr_kl p=" + fmt(p), Objective::smbr_kl, p, ++case_seed, r));
    }
  }
  return out;
}

}  // namespace hdnn
