#pragma once

// Plain sigmoid DNNs and highway DNNs with a single gate pair (W_T, W_c)
// shared by hidden layers 2..L. Layer 1 maps the input to H units and has no
// carry path; the gates carry no bias.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "hdnn/errors.hpp"
#include "hdnn/losses.hpp"
#include "hdnn/matrix.hpp"
#include "hdnn/random.hpp"

namespace hdnn {

enum class Architecture : std::uint32_t { plain_dnn = 0, highway = 1 };

inline std::string_view to_string(Architecture a) {
  return a == Architecture::plain_dnn ? "plain" : "highway";
}

struct GateConfig {
  bool transform_enabled = true;
  bool carry_enabled = true;
  /// Carry gate computed as 1 - T; no W_c is stored.
  bool constrained = false;

  friend bool operator==(const GateConfig&, const GateConfig&) = default;
};

struct ModelConfig {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t num_layers = 1;
  std::size_t output_dim = 0;
  Architecture architecture = Architecture::highway;
  GateConfig gate;

  bool is_highway() const { return architecture == Architecture::highway; }
  bool has_transform_weights() const { return is_highway() && gate.transform_enabled; }
  bool has_carry_weights() const { return is_highway() && gate.carry_enabled && !gate.constrained; }
  /// Whether the carry term h_{l-1} ∘ C contributes at all.
  bool uses_carry() const { return is_highway() && (gate.carry_enabled || gate.constrained); }

  void validate() const {
    if (input_dim == 0 || hidden_dim == 0 || output_dim == 0 || num_layers == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    if (is_highway()) {
      if (gate.constrained && !gate.transform_enabled) {
        throw ConfigError("constrained gates require the transform gate");
      }
      if (!gate.transform_enabled && !gate.carry_enabled) {
        throw ConfigError("highway network needs at least one of the transform/carry gates");
      }
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct AffineLayer {
  Matrix weight;  // out × in
  Matrix bias;    // 1 × out

  friend bool operator==(const AffineLayer&, const AffineLayer&) = default;
};

enum class ParamGroup { hidden, gates, output };

/// θ_h = hidden, θ_g = (gate_transform, gate_carry), θ_c = output.
/// Absent gate matrices are empty.
struct Parameters {
  std::vector<AffineLayer> hidden;
  Matrix gate_transform;
  Matrix gate_carry;
  AffineLayer output;

  friend bool operator==(const Parameters&, const Parameters&) = default;
};

/// Gradients have exactly the structure of the parameters they belong to.
using Gradients = Parameters;

/// Visits every present parameter array in declaration order:
/// W_1, b_1, ..., W_L, b_L, W_T, W_c, W_out, b_out.
template <class P, class F>
  requires std::is_same_v<std::remove_const_t<P>, Parameters>
void for_each_array(P& params, F&& f) {
  for (auto& layer : params.hidden) {
    f(ParamGroup::hidden, layer.weight);
    f(ParamGroup::hidden, layer.bias);
  }
  if (!params.gate_transform.empty()) f(ParamGroup::gates, params.gate_transform);
  if (!params.gate_carry.empty()) f(ParamGroup::gates, params.gate_carry);
  f(ParamGroup::output, params.output.weight);
  f(ParamGroup::output, params.output.bias);
}

/// Parallel visit over two structurally identical parameter sets.
template <class A, class B, class F>
void for_each_array_pair(A& a, B& b, F&& f) {
  using MatA = std::conditional_t<std::is_const_v<A>, const Matrix, Matrix>;
  using MatB = std::conditional_t<std::is_const_v<B>, const Matrix, Matrix>;
  std::vector<std::pair<ParamGroup, MatA*>> lhs;
  std::vector<MatB*> rhs;
  for_each_array(a, [&](ParamGroup g, MatA& m) { lhs.emplace_back(g, &m); });
  for_each_array(b, [&](ParamGroup, MatB& m) { rhs.push_back(&m); });
  if (lhs.size() != rhs.size()) throw ConsistencyError("parameter structures differ in array count");
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    if (!lhs[i].second->same_shape(*rhs[i])) {
      throw ConsistencyError("parameter structures differ at array " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < lhs.size(); ++i) f(lhs[i].first, *lhs[i].second, *rhs[i]);
}

inline std::size_t element_count(const Parameters& params) {
  std::size_t n = 0;
  for_each_array(params, [&](ParamGroup, const Matrix& m) { n += m.size(); });
  return n;
}

/// Zero-filled parameters shaped for config.
inline Parameters zero_parameters(const ModelConfig& config) {
  config.validate();
  Parameters p;
  const std::size_t h = config.hidden_dim;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::size_t in = l == 0 ? config.input_dim : h;
    p.hidden.push_back({Matrix(h, in), Matrix(1, h)});
  }
  if (config.has_transform_weights()) p.gate_transform = Matrix(h, h);
  if (config.has_carry_weights()) p.gate_carry = Matrix(h, h);
  p.output = {Matrix(config.output_dim, h), Matrix(1, config.output_dim)};
  return p;
}

inline Parameters zeros_like(const Parameters& params) {
  Parameters z = params;
  for_each_array(z, [](ParamGroup, Matrix& m) { m = Matrix(m.rows(), m.cols()); });
  return z;
}

/// Weights i.i.d. uniform on [-0.5, 0.5]; biases zero.
inline Parameters init_params(const ModelConfig& config, std::uint64_t seed) {
  Parameters p = zero_parameters(config);
  Rng rng(seed);
  auto fill = [&](Matrix& m) {
    for (double& v : m.values()) v = rng.uniform(-0.5, 0.5);
  };
  for (auto& layer : p.hidden) fill(layer.weight);
  if (!p.gate_transform.empty()) fill(p.gate_transform);
  if (!p.gate_carry.empty()) fill(p.gate_carry);
  fill(p.output.weight);
  return p;
}

/// Exact number of scalar parameters for config.
inline std::uint64_t param_count(const ModelConfig& config) {
  config.validate();
  const std::uint64_t d = config.input_dim;
  const std::uint64_t h = config.hidden_dim;
  const std::uint64_t l = config.num_layers;
  const std::uint64_t j = config.output_dim;
  std::uint64_t n = d * h + h + (l - 1) * (h * h + h) + h * j + j;
  if (config.has_transform_weights()) n += h * h;
  if (config.has_carry_weights()) n += h * h;
  return n;
}

inline void check_structure(const Parameters& params, const ModelConfig& config) {
  config.validate();
  const Parameters expected = zero_parameters(config);
  std::size_t i = 0;
  std::vector<const Matrix*> want;
  for_each_array(expected, [&](ParamGroup, const Matrix& m) { want.push_back(&m); });
  for_each_array(params, [&](ParamGroup, const Matrix& m) {
    if (i >= want.size() || !want[i]->same_shape(m)) {
      throw ConsistencyError("parameters do not match model config at array " + std::to_string(i));
    }
    ++i;
  });
  if (i != want.size()) throw ConsistencyError("parameters do not match model config (array count)");
}

/// Per-layer quantities cached for backpropagation. All matrices are B×H.
/// For layer 1 and for plain layers the gate matrices are empty.
struct LayerTrace {
  Matrix pre;        // W_l h_{l-1} + b_l
  Matrix act;        // sigmoid(pre)
  Matrix transform;  // T(h_{l-1}); empty when the transform gate is disabled
  Matrix carry;      // C(h_{l-1}); empty when no carry term
  Matrix out;        // h_l
};

struct ForwardTrace {
  Matrix input;
  std::vector<LayerTrace> layers;
  Matrix logits;
  Matrix posteriors;
  double temperature = 1.0;
  /// Set when the forward pass ran with T ≡ 1, C ≡ 0 forced.
  bool gates_forced_plain = false;

  std::size_t batch_size() const { return input.rows(); }
};

struct ForwardOptions {
  /// Compute W_l h, W_T h, W_c h with one product against the stacked matrix.
  bool packed = false;
  /// Test hook: evaluate highway layers with T ≡ 1 and C ≡ 0.
  bool force_plain_gates = false;
};

/// Stacked [W_l; W_T; W_c] for highway layer `layer` (1-based, 2..L).
inline Matrix pack_weights(const Parameters& params, const ModelConfig& config, std::size_t layer) {
  if (!config.is_highway() || !config.has_transform_weights() || !config.has_carry_weights()) {
    throw ConfigError("pack_weights needs a highway network with both gate matrices");
  }
  if (layer < 2 || layer > config.num_layers) {
    throw ConfigError("pack_weights: layer " + std::to_string(layer) + " is not a gated layer (2.." +
                      std::to_string(config.num_layers) + ")");
  }
  const Matrix blocks[] = {params.hidden[layer - 1].weight, params.gate_transform, params.gate_carry};
  return vstack(blocks);
}

namespace detail {

inline void require_finite(const Matrix& m, std::size_t layer, const char* what) {
  if (!all_finite(m)) {
    throw NumericError(std::string("non-finite ") + what + " in layer " + std::to_string(layer));
  }
}

inline Matrix one_minus(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.values()[i] = 1.0 - m.values()[i];
  return out;
}

/// s ∘ (1 - s), the sigmoid derivative expressed through its output.
inline Matrix sigmoid_slope(const Matrix& s) {
  Matrix out(s.rows(), s.cols());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double v = s.values()[i];
    out.values()[i] = v * (1.0 - v);
  }
  return out;
}

}  // namespace detail

inline ForwardTrace forward(const Parameters& params, const ModelConfig& config, const Matrix& batch,
                            double temperature = 1.0, ForwardOptions options = {}) {
  check_structure(params, config);
  require_positive_temperature(temperature);
  if (batch.cols() != config.input_dim) {
    throw ShapeError("forward: batch " + batch.shape_string() + " does not have input_dim " +
                     std::to_string(config.input_dim) + " columns");
  }
  ForwardTrace trace;
  trace.input = batch;
  trace.temperature = temperature;
  trace.gates_forced_plain = options.force_plain_gates && config.is_highway();
  trace.layers.reserve(config.num_layers);

  const std::size_t h = config.hidden_dim;
  const bool gated = config.is_highway() && !trace.gates_forced_plain;

  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const AffineLayer& layer = params.hidden[l];
    const Matrix& prev = l == 0 ? batch : trace.layers.back().out;
    LayerTrace lt;
    Matrix gate_t_pre;
    Matrix gate_c_pre;
    if (l > 0 && gated && options.packed) {
      std::vector<Matrix> blocks{layer.weight};
      if (config.has_transform_weights()) blocks.push_back(params.gate_transform);
      if (config.has_carry_weights()) blocks.push_back(params.gate_carry);
      const Matrix stacked = matmul_nt(prev, vstack(blocks));
      std::size_t offset = 0;
      lt.pre = column_slice(stacked, offset, h);
      offset += h;
      if (config.has_transform_weights()) {
        gate_t_pre = column_slice(stacked, offset, h);
        offset += h;
      }
      if (config.has_carry_weights()) gate_c_pre = column_slice(stacked, offset, h);
    } else {
      lt.pre = matmul_nt(prev, layer.weight);
      if (l > 0 && gated) {
        if (config.has_transform_weights()) gate_t_pre = matmul_nt(prev, params.gate_transform);
        if (config.has_carry_weights()) gate_c_pre = matmul_nt(prev, params.gate_carry);
      }
    }
    lt.pre = add_row(lt.pre, layer.bias);
    detail::require_finite(lt.pre, l + 1, "pre-activation");
    lt.act = sigmoid(lt.pre);

    if (l == 0 || !gated) {
      lt.out = lt.act;
    } else {
      Matrix transformed = lt.act;
      if (config.has_transform_weights()) {
        lt.transform = sigmoid(gate_t_pre);
        transformed = hadamard(lt.act, lt.transform);
      }
      if (config.gate.constrained) {
        lt.carry = detail::one_minus(lt.transform);
      } else if (config.has_carry_weights()) {
        lt.carry = sigmoid(gate_c_pre);
      }
      lt.out = lt.carry.empty() ? transformed : add(transformed, hadamard(prev, lt.carry));
    }
    detail::require_finite(lt.out, l + 1, "activation");
    trace.layers.push_back(std::move(lt));
  }

  trace.logits = add_row(matmul_nt(trace.layers.back().out, params.output.weight), params.output.bias);
  detail::require_finite(trace.logits, config.num_layers + 1, "logit");
  trace.posteriors = softmax_temperature(trace.logits, temperature);
  return trace;
}

/// Exact gradients of a scalar loss given dLoss/dlogits. Contributions to
/// the tied gate matrices are summed over layers 2..L.
inline Gradients backward(const Parameters& params, const ModelConfig& config, const ForwardTrace& trace,
                          const Matrix& dlogits) {
  check_structure(params, config);
  const std::size_t batch = trace.batch_size();
  if (trace.layers.size() != config.num_layers || trace.input.cols() != config.input_dim ||
      trace.logits.rows() != batch || trace.logits.cols() != config.output_dim) {
    throw ConsistencyError("backward: trace was not produced by this model");
  }
  for (const auto& lt : trace.layers) {
    if (lt.out.rows() != batch || lt.out.cols() != config.hidden_dim) {
      throw ConsistencyError("backward: trace layer shape does not match the model");
    }
  }
  if (dlogits.rows() != batch || dlogits.cols() != config.output_dim) {
    throw ShapeError("backward: dlogits " + dlogits.shape_string() + " vs logits " +
                     trace.logits.shape_string());
  }

  Gradients grads = zeros_like(params);
  grads.output.weight = matmul_tn(dlogits, trace.layers.back().out);
  grads.output.bias = column_sums(dlogits);
  Matrix dh = matmul(dlogits, params.output.weight);

  const bool gated = config.is_highway() && !trace.gates_forced_plain;

  for (std::size_t l = config.num_layers; l-- > 0;) {
    const LayerTrace& lt = trace.layers[l];
    const Matrix& prev = l == 0 ? trace.input : trace.layers[l - 1].out;

    Matrix dact = dh;
    Matrix dprev;
    if (l > 0 && gated) {
      // h = s ∘ T + prev ∘ C
      Matrix dtransform;
      if (!lt.transform.empty()) {
        dact = hadamard(dh, lt.transform);
        dtransform = hadamard(dh, lt.act);
      }
      if (!lt.carry.empty()) {
        dprev = hadamard(dh, lt.carry);
        const Matrix dcarry = hadamard(dh, prev);
        if (config.gate.constrained) {
          dtransform = subtract(dtransform, dcarry);
        } else {
          const Matrix dcarry_pre = hadamard(dcarry, detail::sigmoid_slope(lt.carry));
          add_in_place(grads.gate_carry, matmul_tn(dcarry_pre, prev));
          add_in_place(dprev, matmul(dcarry_pre, params.gate_carry));
        }
      }
      if (!lt.transform.empty()) {
        const Matrix dtransform_pre = hadamard(dtransform, detail::sigmoid_slope(lt.transform));
        add_in_place(grads.gate_transform, matmul_tn(dtransform_pre, prev));
        const Matrix via_gate = matmul(dtransform_pre, params.gate_transform);
        if (dprev.empty()) {
          dprev = via_gate;
        } else {
          add_in_place(dprev, via_gate);
        }
      }
    }

    const Matrix dpre = hadamard(dact, detail::sigmoid_slope(lt.act));
    grads.hidden[l].weight = matmul_tn(dpre, prev);
    grads.hidden[l].bias = column_sums(dpre);
    if (l == 0) break;
    const Matrix via_layer = matmul(dpre, params.hidden[l].weight);
    if (dprev.empty()) {
      dh = via_layer;
    } else {
      add_in_place(dprev, via_layer);
      dh = std::move(dprev);
    }
  }
  return grads;
}

}  // namespace hdnn
