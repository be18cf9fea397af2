#pragma once

// Minibatch SGD with classical momentum, parameter-group masking, and the
// epoch drivers for frame-level (CE, teacher-student, hybrid) and
// sequence-level (sMBR with CE or KL smoothing) training, plus gate
// adaptation and evaluation.
//
// Learning rates are per sample: a minibatch step moves the parameters by
// lr · Σ_samples ∂ℓ/∂θ, i.e. lr · B times the batch-mean gradient.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hdnn/errors.hpp"
#include "hdnn/lattice.hpp"
#include "hdnn/losses.hpp"
#include "hdnn/matrix.hpp"
#include "hdnn/network.hpp"
#include "hdnn/random.hpp"

namespace hdnn {

struct ParamMask {
  bool hidden = true;
  bool gates = true;
  bool output = true;

  static constexpr ParamMask all() { return {true, true, true}; }
  static constexpr ParamMask gates_only() { return {false, true, false}; }

  bool allows(ParamGroup g) const {
    switch (g) {
      case ParamGroup::hidden: return hidden;
      case ParamGroup::gates: return gates;
      case ParamGroup::output: return output;
    }
    return false;
  }
  bool any() const { return hidden || gates || output; }

  friend bool operator==(const ParamMask&, const ParamMask&) = default;
};

struct MomentumState {
  Parameters velocity;

  static MomentumState zeros_for(const Parameters& params) { return {zeros_like(params)}; }
};

/// For every unmasked group: v ← momentum·v − lr·g; θ ← θ + v.
/// Masked groups (parameters and velocity) are left untouched.
inline void sgd_step(Parameters& params, const Gradients& grads, MomentumState& state, double lr, double momentum,
                     ParamMask mask) {
  std::vector<Matrix*> velocity;
  for_each_array(state.velocity, [&](ParamGroup, Matrix& v) { velocity.push_back(&v); });
  std::size_t i = 0;
  for_each_array_pair(params, grads, [&](ParamGroup group, Matrix& theta, const Matrix& g) {
    if (i >= velocity.size() || !velocity[i]->same_shape(theta)) {
      throw ConsistencyError("momentum state does not match parameters");
    }
    Matrix& v = *velocity[i++];
    if (!mask.allows(group)) return;
    auto tv = theta.values();
    auto vv = v.values();
    auto gv = g.values();
    for (std::size_t k = 0; k < tv.size(); ++k) {
      vv[k] = momentum * vv[k] - lr * gv[k];
      tv[k] += vv[k];
    }
  });
  if (i != velocity.size()) throw ConsistencyError("momentum state does not match parameters");
}

/// Frames with one class label each.
struct FrameData {
  Matrix features;
  std::vector<std::size_t> labels;

  std::size_t size() const { return features.rows(); }
};

/// One utterance for sequence training: its frames, their reference states
/// and a denominator lattice over the same frames.
struct Utterance {
  Matrix features;
  ReferencePath reference;
  Lattice lattice;
};

struct TrainingData {
  FrameData frames;
  std::vector<Utterance> utterances;
};

struct TeacherModel {
  Parameters params;
  ModelConfig config;
};

enum class Objective { ce, kd, hybrid, smbr_ce, smbr_kl };

inline std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::ce: return "ce";
    case Objective::kd: return "kd";
    case Objective::hybrid: return "hybrid";
    case Objective::smbr_ce: return "smbr_ce";
    case Objective::smbr_kl: return "smbr_kl";
  }
  return "?";
}

inline Objective parse_objective(std::string_view s) {
  for (auto o : {Objective::ce, Objective::kd, Objective::hybrid, Objective::smbr_ce, Objective::smbr_kl}) {
    if (to_string(o) == s) return o;
  }
  throw ConfigError("unknown objective '" + std::string(s) + "'");
}

inline bool needs_teacher(Objective o) {
  return o == Objective::kd || o == Objective::hybrid || o == Objective::smbr_kl;
}
inline bool is_sequence(Objective o) { return o == Objective::smbr_ce || o == Objective::smbr_kl; }

struct TrainConfig {
  Objective objective = Objective::ce;
  double learning_rate = 1e-2;  // per sample
  double momentum_first_epoch = 0.0;
  double momentum_later = 0.9;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double q = 0.0;  // hybrid: KL + q·CE
  double p = 0.2;  // sequence: sMBR + p·(CE|KL)
  double temperature = 1.0;
  double acoustic_scale = 1.0;
  ParamMask mask = ParamMask::all();
  std::uint64_t seed = 0;

  double momentum_for_epoch(std::size_t epoch) const { return epoch <= 1 ? momentum_first_epoch : momentum_later; }

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (!(q >= 0.0) || !(p >= 0.0)) throw ConfigError("q and p must be nonnegative");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(acoustic_scale > 0.0)) throw ConfigError("acoustic scale must be positive");
    if (!mask.any()) throw ConfigError("parameter mask updates nothing");
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 0 = before training
  Objective objective = Objective::ce;
  double loss = 0.0;  // objective per frame
  double fer = 0.0;
  /// Sequence objectives only: Σ E[A] / Σ T over utterances.
  std::optional<double> expected_accuracy;
};

struct TrainResult {
  Parameters params;
  std::vector<EpochMetrics> history;
};

struct Evaluation {
  double frame_error_rate = 0.0;
  double mean_ce = 0.0;
};

/// FER and mean CE (temperature 1) of the model on labelled frames.
inline Evaluation evaluate(const Parameters& params, const ModelConfig& config, const FrameData& data) {
  if (data.size() == 0) throw ParameterError("evaluate: empty data");
  if (data.labels.size() != data.size()) throw ShapeError("evaluate: label count differs from frame count");
  const ForwardTrace trace = forward(params, config, data.features);
  std::size_t errors = 0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    if (argmax(trace.posteriors.row(r)) != data.labels[r]) ++errors;
  }
  return {static_cast<double>(errors) / static_cast<double>(data.size()),
          ce_loss(trace.posteriors, data.labels).value};
}

/// Argmax labels of the model's posteriors.
inline std::vector<std::size_t> decode_frames(const Parameters& params, const ModelConfig& config,
                                              const Matrix& features) {
  const ForwardTrace trace = forward(params, config, features);
  std::vector<std::size_t> out(features.rows());
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = argmax(trace.posteriors.row(r));
  return out;
}

inline Matrix teacher_posteriors(const TeacherModel& teacher, const Matrix& features, double temperature) {
  return forward(teacher.params, teacher.config, features, temperature).posteriors;
}

/// Fisher-Yates permutation driven by Rng, identical across platforms.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
  return idx;
}

/// Loss and gradient of one frame-level minibatch.
struct BatchObjective {
  double loss = 0.0;
  Gradients grads;
  std::size_t frames = 0;
};

inline LossResult frame_objective(Objective objective, const Matrix& posteriors, std::span<const std::size_t> labels,
                                  const Matrix* soft, double q, double temperature) {
  switch (objective) {
    case Objective::ce: return ce_loss(posteriors, labels, temperature);
    case Objective::kd: return kl_loss(posteriors, *soft, temperature);
    case Objective::hybrid: return hybrid_loss(posteriors, *soft, labels, q, temperature);
    default: throw ConfigError("frame_objective: sequence objective");
  }
}

inline BatchObjective frame_batch_objective(const Parameters& params, const ModelConfig& config,
                                            const TrainConfig& tcfg, const Matrix& features,
                                            std::span<const std::size_t> labels, const Matrix* soft) {
  const ForwardTrace trace = forward(params, config, features, tcfg.temperature);
  const LossResult loss = frame_objective(tcfg.objective, trace.posteriors, labels, soft, tcfg.q, tcfg.temperature);
  return {loss.value, backward(params, config, trace, loss.dlogits), features.rows()};
}

/// Per-utterance sequence objective: sMBR risk plus p times the frame loss
/// summed over the utterance's frames.
struct SequenceObjective {
  double loss = 0.0;
  double expected_accuracy = 0.0;
  Gradients grads;
  std::size_t frames = 0;
};

inline SequenceObjective sequence_utterance_objective(const Parameters& params, const ModelConfig& config,
                                                      const TrainConfig& tcfg, const Utterance& utt,
                                                      const Matrix* soft, bool with_gradient = true) {
  const ForwardTrace trace = forward(params, config, utt.features, tcfg.temperature);
  const Matrix log_post = log_softmax_temperature(trace.logits, tcfg.temperature);
  const SmbrResult smbr = smbr_forward_backward(utt.lattice, utt.reference, log_post, tcfg.acoustic_scale);
  LossResult frame = tcfg.objective == Objective::smbr_kl ? kl_loss(trace.posteriors, *soft, tcfg.temperature)
                                                          : ce_loss(trace.posteriors, utt.reference, tcfg.temperature);
  const double frames = static_cast<double>(utt.features.rows());
  frame.value *= frames;
  frame.dlogits = scale(frame.dlogits, frames);
  const auto mode =
      tcfg.objective == Objective::smbr_kl ? SequenceSmoothing::kl_smoothed : SequenceSmoothing::ce_smoothed;
  const SequenceLossResult seq =
      regularized_sequence_loss(smbr, frame, trace.posteriors, tcfg.temperature, tcfg.p, mode);
  SequenceObjective out;
  out.loss = seq.value;
  out.expected_accuracy = smbr.expected_accuracy;
  out.frames = utt.features.rows();
  if (with_gradient) out.grads = backward(params, config, trace, seq.dlogits);
  return out;
}

namespace detail {

inline void check_training_inputs(const ModelConfig& config, const TrainingData& data, const TrainConfig& tcfg,
                                  const TeacherModel* teacher) {
  config.validate();
  tcfg.validate();
  if (needs_teacher(tcfg.objective) && teacher == nullptr) {
    throw ConfigError("objective " + std::string(to_string(tcfg.objective)) + " needs a teacher model");
  }
  if (!needs_teacher(tcfg.objective) && teacher != nullptr) {
    throw ConfigError("objective " + std::string(to_string(tcfg.objective)) + " does not use a teacher model");
  }
  if (teacher && (teacher->config.input_dim != config.input_dim || teacher->config.output_dim != config.output_dim)) {
    throw ConfigError("teacher input/output dimensions differ from the student's");
  }
  if (is_sequence(tcfg.objective)) {
    if (data.utterances.empty()) throw ConfigError("sequence objective needs utterances with lattices");
    for (const auto& u : data.utterances) {
      if (u.features.rows() != u.lattice.num_frames() || u.reference.size() != u.lattice.num_frames()) {
        throw ConsistencyError("utterance frames, reference and lattice lengths differ");
      }
    }
  } else {
    if (data.frames.size() == 0) throw ConfigError("frame objective needs labelled frames");
    if (data.frames.labels.size() != data.frames.size()) throw ShapeError("label count differs from frame count");
  }
  if (!config.is_highway() && !tcfg.mask.hidden && !tcfg.mask.output) {
    throw ConfigError("mask updates only gates but the network has none");
  }
}

}  // namespace detail

/// All utterance frames stacked in order, labelled with their references.
inline FrameData concatenate_frames(std::span<const Utterance> utts) {
  std::size_t rows = 0;
  const std::size_t cols = utts.empty() ? 0 : utts.front().features.cols();
  for (const auto& u : utts) rows += u.features.rows();
  FrameData out{Matrix(rows, cols), {}};
  std::size_t r = 0;
  for (const auto& u : utts) {
    for (std::size_t i = 0; i < u.features.rows(); ++i, ++r) {
      std::copy(u.features.row(i).begin(), u.features.row(i).end(), out.features.row(r).begin());
    }
    out.labels.insert(out.labels.end(), u.reference.begin(), u.reference.end());
  }
  return out;
}

/// Runs tcfg.epochs of minibatch SGD on the selected objective. Frame
/// objectives draw shuffled minibatches of frames; sequence objectives use one
/// utterance per step in shuffled order. history[0] holds the metrics of the
/// initial parameters, history[e] those after epoch e.
inline TrainResult train(Parameters params, const ModelConfig& config, const TrainingData& data,
                         const TrainConfig& tcfg, const TeacherModel* teacher = nullptr) {
  detail::check_training_inputs(config, data, tcfg, teacher);
  check_structure(params, config);
  const bool sequence = is_sequence(tcfg.objective);

  // Teacher posteriors are fixed for the whole run.
  Matrix soft_frames;
  std::vector<Matrix> soft_utts;
  if (teacher) {
    if (sequence) {
      for (const auto& u : data.utterances) soft_utts.push_back(teacher_posteriors(*teacher, u.features, tcfg.temperature));
    } else {
      soft_frames = teacher_posteriors(*teacher, data.frames.features, tcfg.temperature);
    }
  }
  const FrameData seq_frames = sequence ? concatenate_frames(data.utterances) : FrameData{};
  const FrameData& eval_frames = sequence ? seq_frames : data.frames;

  auto measure = [&](const Parameters& p, std::size_t epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.objective = tcfg.objective;
    m.fer = evaluate(p, config, eval_frames).frame_error_rate;
    if (sequence) {
      double loss = 0.0, acc = 0.0, frames = 0.0;
      for (std::size_t i = 0; i < data.utterances.size(); ++i) {
        const auto r = sequence_utterance_objective(p, config, tcfg, data.utterances[i],
                                                    teacher ? &soft_utts[i] : nullptr, false);
        loss += r.loss;
        acc += r.expected_accuracy;
        frames += static_cast<double>(r.frames);
      }
      m.loss = loss / frames;
      m.expected_accuracy = acc / frames;
    } else {
      const ForwardTrace trace = forward(p, config, data.frames.features, tcfg.temperature);
      m.loss = frame_objective(tcfg.objective, trace.posteriors, data.frames.labels, teacher ? &soft_frames : nullptr,
                               tcfg.q, tcfg.temperature)
                   .value;
    }
    return m;
  };

  TrainResult result;
  result.history.push_back(measure(params, 0));
  MomentumState state = MomentumState::zeros_for(params);
  Rng rng(tcfg.seed);

  for (std::size_t epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    const double momentum = tcfg.momentum_for_epoch(epoch);
    if (sequence) {
      for (std::size_t i : shuffled_indices(data.utterances.size(), rng)) {
        const auto r = sequence_utterance_objective(params, config, tcfg, data.utterances[i],
                                                    teacher ? &soft_utts[i] : nullptr);
        sgd_step(params, r.grads, state, tcfg.learning_rate, momentum, tcfg.mask);
      }
    } else {
      const auto order = shuffled_indices(data.frames.size(), rng);
      for (std::size_t begin = 0; begin < order.size(); begin += tcfg.batch_size) {
        const std::size_t count = std::min(tcfg.batch_size, order.size() - begin);
        const std::span<const std::size_t> idx(order.data() + begin, count);
        const Matrix features = gather_rows(data.frames.features, idx);
        std::vector<std::size_t> labels(count);
        for (std::size_t k = 0; k < count; ++k) labels[k] = data.frames.labels[idx[k]];
        Matrix soft;
        if (teacher) soft = gather_rows(soft_frames, idx);
        const auto r = frame_batch_objective(params, config, tcfg, features, labels, teacher ? &soft : nullptr);
        sgd_step(params, r.grads, state, tcfg.learning_rate * static_cast<double>(count), momentum, tcfg.mask);
      }
    }
    result.history.push_back(measure(params, epoch));
  }
  result.params = std::move(params);
  return result;
}

enum class LabelSource { hard_pseudo, soft_teacher, oracle_hard };

inline std::string_view to_string(LabelSource s) {
  switch (s) {
    case LabelSource::hard_pseudo: return "hard_pseudo";
    case LabelSource::soft_teacher: return "soft_teacher";
    case LabelSource::oracle_hard: return "oracle_hard";
  }
  return "?";
}

inline LabelSource parse_label_source(std::string_view s) {
  for (auto l : {LabelSource::hard_pseudo, LabelSource::soft_teacher, LabelSource::oracle_hard}) {
    if (to_string(l) == s) return l;
  }
  throw ConfigError("unknown label source '" + std::string(s) + "'");
}

struct AdaptConfig {
  double learning_rate = 2e-4;  // per sample
  std::size_t epochs = 5;
  LabelSource label_source = LabelSource::hard_pseudo;
  ParamMask mask = ParamMask::gates_only();
  std::size_t batch_size = 32;
  double momentum_first_epoch = 0.0;
  double momentum_later = 0.9;
  std::uint64_t seed = 0;
};

struct AdaptResult {
  Parameters params;
  /// CE (KL for soft labels) on the adaptation data against the adaptation
  /// labels; entry 0 is before adaptation.
  std::vector<double> loss_history;
  /// Per-epoch metrics of the underlying training run (FER against the
  /// adaptation labels).
  std::vector<EpochMetrics> history;
  std::vector<std::size_t> labels_used;
};

/// Two-pass adaptation: obtain labels for the adaptation frames (argmax
/// decoding with the current model, teacher posteriors, or the given oracle
/// labels), then fine-tune the unmasked groups on them.
inline AdaptResult adapt(const Parameters& params, const ModelConfig& config, const FrameData& data,
                         const AdaptConfig& acfg, const TeacherModel* teacher = nullptr) {
  if (!config.is_highway() && acfg.mask.gates && !acfg.mask.hidden && !acfg.mask.output) {
    throw ConfigError("gate-only adaptation needs a highway network");
  }
  if (acfg.label_source == LabelSource::soft_teacher && teacher == nullptr) {
    throw ConfigError("soft_teacher adaptation needs a teacher model");
  }
  if (data.size() == 0) throw ParameterError("adapt: empty adaptation data");

  TrainingData td;
  td.frames.features = data.features;
  TrainConfig tcfg;
  tcfg.learning_rate = acfg.learning_rate;
  tcfg.epochs = acfg.epochs;
  tcfg.batch_size = acfg.batch_size;
  tcfg.mask = acfg.mask;
  tcfg.seed = acfg.seed;
  tcfg.momentum_first_epoch = acfg.momentum_first_epoch;
  tcfg.momentum_later = acfg.momentum_later;

  const TeacherModel* used_teacher = nullptr;
  switch (acfg.label_source) {
    case LabelSource::hard_pseudo:
      td.frames.labels = decode_frames(params, config, data.features);
      tcfg.objective = Objective::ce;
      break;
    case LabelSource::oracle_hard:
      if (data.labels.size() != data.size()) throw ConfigError("oracle_hard adaptation needs labelled frames");
      td.frames.labels = data.labels;
      tcfg.objective = Objective::ce;
      break;
    case LabelSource::soft_teacher:
      td.frames.labels = decode_frames(teacher->params, teacher->config, data.features);
      tcfg.objective = Objective::kd;
      used_teacher = teacher;
      break;
  }
  TrainResult tr = train(params, config, td, tcfg, used_teacher);
  AdaptResult out;
  out.params = std::move(tr.params);
  for (const auto& m : tr.history) out.loss_history.push_back(m.loss);
  out.history = std::move(tr.history);
  out.labels_used = std::move(td.frames.labels);
  return out;
}

}  // namespace hdnn
