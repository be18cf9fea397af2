#pragma once

// Synthetic stand-ins for acoustic data: class-conditional Gaussian frames,
// utterances built from them, and toy denominator lattices around a reference.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <set>
#include <vector>

#include "hdnn/errors.hpp"
#include "hdnn/lattice.hpp"
#include "hdnn/matrix.hpp"
#include "hdnn/random.hpp"
#include "hdnn/training.hpp"

namespace hdnn {

struct DatasetSpec {
  std::size_t num_classes = 4;
  std::size_t feature_dim = 8;
  std::size_t frames_per_class = 50;
  /// Class means are drawn N(0, mean_scale²) per dimension from class_seed.
  double mean_scale = 1.0;
  /// Shared isotropic noise around each mean.
  double noise_stddev = 1.0;
  /// Added to every generated frame; empty for no shift.
  std::vector<double> shift;
  std::uint64_t class_seed = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes == 0 || feature_dim == 0 || frames_per_class == 0) {
      throw ConfigError("dataset dimensions must be positive");
    }
    if (!(noise_stddev >= 0.0) || !(mean_scale >= 0.0)) throw ConfigError("dataset scales must be nonnegative");
    if (!shift.empty() && shift.size() != feature_dim) throw ConfigError("shift length differs from feature_dim");
  }
};

/// J×D matrix of class means; depends only on class_seed and the dimensions.
inline Matrix class_means(const DatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.class_seed ^ 0x9e3779b97f4a7c15ULL);
  Matrix means(spec.num_classes, spec.feature_dim);
  for (double& v : means.values()) v = rng.normal(0.0, spec.mean_scale);
  return means;
}

namespace detail {

inline void sample_frame(const DatasetSpec& spec, const Matrix& means, std::size_t label, Rng& rng,
                         std::span<double> out) {
  for (std::size_t d = 0; d < out.size(); ++d) {
    out[d] = means(label, d) + rng.normal(0.0, spec.noise_stddev) + (spec.shift.empty() ? 0.0 : spec.shift[d]);
  }
}

}  // namespace detail

/// (J·frames_per_class)×D frames, every class equally represented, in a
/// seeded random order.
inline FrameData generate_synthetic(const DatasetSpec& spec) {
  const Matrix means = class_means(spec);
  Rng rng(spec.seed);
  const std::size_t n = spec.num_classes * spec.frames_per_class;
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % spec.num_classes;
  const auto order = shuffled_indices(n, rng);
  FrameData data{Matrix(n, spec.feature_dim), std::vector<std::size_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    data.labels[i] = labels[order[i]];
    detail::sample_frame(spec, means, data.labels[i], rng, data.features.row(i));
  }
  return data;
}

/// Random frame lattice for testing: up to max_nodes_per_time nodes at each
/// interior time, each with 1..max_arcs_per_node outgoing arcs to the next
/// time. States are drawn from [0, num_states); lm scores from N(0, 1).
inline Lattice random_lattice(std::size_t num_frames, std::size_t num_states, std::size_t max_nodes_per_time,
                              std::size_t max_arcs_per_node, Rng& rng) {
  std::vector<std::vector<std::size_t>> nodes_at(num_frames + 1);
  std::size_t next = 0;
  nodes_at[0].push_back(next++);
  for (std::size_t t = 1; t < num_frames; ++t) {
    const std::size_t count = 1 + rng.index(max_nodes_per_time);
    for (std::size_t i = 0; i < count; ++i) nodes_at[t].push_back(next++);
  }
  nodes_at[num_frames].push_back(next++);

  std::vector<LatticeArc> arcs;
  for (std::size_t t = 0; t < num_frames; ++t) {
    const auto& here = nodes_at[t];
    const auto& there = nodes_at[t + 1];
    std::vector<bool> reached(there.size(), false);
    for (std::size_t from : here) {
      const std::size_t fan = 1 + rng.index(max_arcs_per_node);
      for (std::size_t k = 0; k < fan; ++k) {
        const std::size_t j = rng.index(there.size());
        reached[j] = true;
        arcs.push_back({from, there[j], rng.index(num_states), rng.normal()});
      }
    }
    for (std::size_t j = 0; j < there.size(); ++j) {
      if (!reached[j]) arcs.push_back({here[rng.index(here.size())], there[j], rng.index(num_states), rng.normal()});
    }
  }
  return Lattice(num_frames, next, std::move(arcs));
}

/// Sausage-shaped denominator lattice around a reference: each frame holds
/// the reference state plus up to confusion_size-1 competitors drawn from
/// [0, num_states), with N(0, lm_stddev²) lm scores.
inline Lattice confusion_lattice(const ReferencePath& reference, std::size_t num_states, std::size_t confusion_size,
                                 double lm_stddev, Rng& rng) {
  if (reference.empty()) throw StructuralError("confusion_lattice: empty reference");
  if (confusion_size == 0) throw ConfigError("confusion_lattice: confusion size must be positive");
  std::vector<LatticeArc> arcs;
  for (std::size_t t = 0; t < reference.size(); ++t) {
    std::set<std::size_t> states{reference[t]};
    const std::size_t extra = rng.index(confusion_size);
    for (std::size_t k = 0; k < extra; ++k) states.insert(rng.index(num_states));
    for (std::size_t s : states) arcs.push_back({t, t + 1, s, rng.normal(0.0, lm_stddev)});
  }
  return Lattice(reference.size(), reference.size() + 1, std::move(arcs));
}

struct UtteranceSpec {
  std::size_t num_utterances = 20;
  std::size_t frames_per_utterance = 12;
  /// Probability that the next reference state repeats the current one.
  double self_loop = 0.6;
  std::size_t confusion_size = 3;
  double lm_stddev = 0.5;
  std::uint64_t seed = 0;
};

/// Utterances whose frames are sampled from the dataset's class Gaussians
/// along a random reference state sequence, each with a confusion lattice.
inline std::vector<Utterance> generate_utterances(const DatasetSpec& data_spec, const UtteranceSpec& spec) {
  const Matrix means = class_means(data_spec);
  Rng rng(spec.seed);
  std::vector<Utterance> out;
  out.reserve(spec.num_utterances);
  for (std::size_t u = 0; u < spec.num_utterances; ++u) {
    ReferencePath ref(spec.frames_per_utterance);
    ref[0] = rng.index(data_spec.num_classes);
    for (std::size_t t = 1; t < ref.size(); ++t) {
      ref[t] = rng.uniform() < spec.self_loop ? ref[t - 1] : rng.index(data_spec.num_classes);
    }
    Matrix features(ref.size(), data_spec.feature_dim);
    for (std::size_t t = 0; t < ref.size(); ++t) detail::sample_frame(data_spec, means, ref[t], rng, features.row(t));
    Lattice lat = confusion_lattice(ref, data_spec.num_classes, spec.confusion_size, spec.lm_stddev, rng);
    out.push_back({std::move(features), std::move(ref), std::move(lat)});
  }
  return out;
}

}  // namespace hdnn
