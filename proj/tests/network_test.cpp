#include <cmath>

#include <gtest/gtest.h>

#include "hdnn/losses.hpp"
#include "hdnn/network.hpp"
#include "test_util.hpp"

namespace hdnn {
namespace {

using test::highway_config;
using test::plain_config;
using test::random_matrix;

TEST(InitParams, UniformWeightsZeroBiases) {
  const ModelConfig c = highway_config(7, 9, 4, 5);
  const Parameters p = init_params(c, 42);
  for_each_array(p, [](ParamGroup, const Matrix& m) {
    for (double v : m.values()) {
      EXPECT_GE(v, -0.5);
      EXPECT_LE(v, 0.5);
    }
  });
  for (const auto& layer : p.hidden) EXPECT_EQ(layer.bias, Matrix(1, 9));
  EXPECT_EQ(p.output.bias, Matrix(1, 5));
}

TEST(InitParams, SeededDeterminism) {
  const ModelConfig c = highway_config(4, 6, 3, 3);
  EXPECT_EQ(init_params(c, 1), init_params(c, 1));
  EXPECT_NE(init_params(c, 1), init_params(c, 2));
}

TEST(InitParams, GateStorageFollowsConfig) {
  EXPECT_TRUE(init_params(plain_config(3, 4, 3, 2), 0).gate_transform.empty());
  const Parameters constrained = init_params(highway_config(3, 4, 3, 2, {true, true, true}), 0);
  EXPECT_EQ(constrained.gate_transform.rows(), 4u);
  EXPECT_TRUE(constrained.gate_carry.empty());
  const Parameters carry_only = init_params(highway_config(3, 4, 3, 2, {false, true, false}), 0);
  EXPECT_TRUE(carry_only.gate_transform.empty());
  EXPECT_EQ(carry_only.gate_carry.rows(), 4u);
}

TEST(ModelConfig, GateInvariants) {
  EXPECT_THROW(highway_config(3, 4, 2, 2, {false, false, false}).validate(), ConfigError);
  EXPECT_THROW(highway_config(3, 4, 2, 2, {false, true, true}).validate(), ConfigError);
  EXPECT_THROW(highway_config(0, 4, 2, 2).validate(), ConfigError);
  EXPECT_NO_THROW(plain_config(3, 4, 2, 2).validate());
}

TEST(ParamCount, TableOneConfigurations) {
  EXPECT_EQ(param_count(plain_config(600, 2048, 6, 3972)), 30351236u);
  EXPECT_EQ(param_count(highway_config(600, 512, 10, 3972)), 5233540u);
  EXPECT_EQ(param_count(highway_config(600, 128, 10, 3972)), 770692u);
}

TEST(ParamCount, MatchesAllocatedElements) {
  const GateConfig gates[] = {{true, true, false}, {true, true, true}, {true, false, false}, {false, true, false}};
  for (std::size_t l = 1; l <= 4; ++l) {
    for (const auto& g : gates) {
      const ModelConfig c = highway_config(5, 7, l, 3, g);
      EXPECT_EQ(param_count(c), element_count(init_params(c, 0)));
    }
    const ModelConfig p = plain_config(5, 7, l, 3);
    EXPECT_EQ(param_count(p), element_count(init_params(p, 0)));
  }
  // One gate matrix when only one gate is active or when constrained.
  EXPECT_EQ(param_count(highway_config(5, 7, 3, 3, {true, true, true})),
            param_count(plain_config(5, 7, 3, 3)) + 49u);
}

TEST(Forward, ZeroGateWeightsGiveHalfGates) {
  const ModelConfig c = highway_config(4, 6, 4, 3);
  Parameters p = init_params(c, 3);
  p.gate_transform = Matrix(6, 6);
  p.gate_carry = Matrix(6, 6);
  Rng rng(4);
  const ForwardTrace tr = forward(p, c, random_matrix(5, 4, rng));
  for (std::size_t l = 1; l < c.num_layers; ++l) {
    const auto& lt = tr.layers[l];
    const Matrix& prev = tr.layers[l - 1].out;
    for (std::size_t i = 0; i < lt.out.size(); ++i) {
      EXPECT_EQ(lt.transform.values()[i], 0.5);
      EXPECT_EQ(lt.carry.values()[i], 0.5);
      const double expected = 0.5 * sigmoid(lt.pre.values()[i]) + 0.5 * prev.values()[i];
      EXPECT_NEAR(lt.out.values()[i], expected, 1e-15);
    }
  }
}

// Independent evaluation of h_l = sigmoid(W_l h + b_l) ∘ sigmoid(W_T h) with
// no carry term, written with explicit loops.
Matrix transform_only_reference(const Parameters& p, const Matrix& x) {
  auto affine = [](const Matrix& w, const Matrix* b, std::span<const double> v) {
    std::vector<double> out(w.rows());
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double acc = b ? (*b)(0, i) : 0.0;
      for (std::size_t k = 0; k < v.size(); ++k) acc += w(i, k) * v[k];
      out[i] = acc;
    }
    return out;
  };
  Matrix logits(x.rows(), p.output.weight.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    std::vector<double> h = affine(p.hidden[0].weight, &p.hidden[0].bias, x.row(r));
    for (double& v : h) v = 1.0 / (1.0 + std::exp(-v));
    for (std::size_t l = 1; l < p.hidden.size(); ++l) {
      const auto a = affine(p.hidden[l].weight, &p.hidden[l].bias, h);
      const auto g = affine(p.gate_transform, nullptr, h);
      for (std::size_t i = 0; i < h.size(); ++i) h[i] = (1.0 / (1.0 + std::exp(-a[i]))) * (1.0 / (1.0 + std::exp(-g[i])));
    }
    const auto z = affine(p.output.weight, &p.output.bias, h);
    std::copy(z.begin(), z.end(), logits.row(r).begin());
  }
  return logits;
}

TEST(Forward, CarryDisabledIsTransformOnlyNetwork) {
  const ModelConfig c = highway_config(5, 8, 4, 4, {true, false, false});
  const Parameters p = init_params(c, 17);
  Rng rng(2);
  const Matrix x = random_matrix(6, 5, rng);
  const ForwardTrace tr = forward(p, c, x);
  EXPECT_LT(max_abs_diff(tr.logits, transform_only_reference(p, x)), 1e-12);
  for (std::size_t l = 1; l < c.num_layers; ++l) EXPECT_TRUE(tr.layers[l].carry.empty());
}

TEST(Forward, ConstrainedCarryIsOneMinusTransform) {
  const ModelConfig c = highway_config(3, 6, 5, 3, {true, true, true});
  const Parameters p = init_params(c, 8);
  Rng rng(8);
  const ForwardTrace tr = forward(p, c, random_matrix(4, 3, rng));
  for (std::size_t l = 1; l < c.num_layers; ++l) {
    const auto& lt = tr.layers[l];
    for (std::size_t i = 0; i < lt.carry.size(); ++i) {
      EXPECT_LE(std::abs(lt.carry.values()[i] - (1.0 - lt.transform.values()[i])), 1e-15);
    }
  }
}

TEST(Forward, GatesInOpenUnitIntervalAndPosteriorsNormalised) {
  const ModelConfig c = highway_config(4, 5, 3, 6);
  const Parameters p = init_params(c, 5);
  Rng rng(6);
  const Matrix x = random_matrix(7, 4, rng);
  for (double t : {0.5, 1.0, 2.0, 3.0, 10.0}) {
    const ForwardTrace tr = forward(p, c, x, t);
    for (std::size_t l = 1; l < c.num_layers; ++l) {
      for (double v : tr.layers[l].transform.values()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
    }
    for (std::size_t r = 0; r < tr.posteriors.rows(); ++r) {
      double s = 0.0;
      for (double v : tr.posteriors.row(r)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Forward, ForcedPlainGatesEqualPlainNetwork) {
  const ModelConfig hc = highway_config(4, 6, 4, 3);
  const ModelConfig pc = plain_config(4, 6, 4, 3);
  const Parameters hp = init_params(hc, 12);
  Parameters pp = zero_parameters(pc);
  pp.hidden = hp.hidden;
  pp.output = hp.output;
  Rng rng(3);
  const Matrix x = random_matrix(5, 4, rng);
  const ForwardTrace forced = forward(hp, hc, x, 1.0, {.packed = false, .force_plain_gates = true});
  const ForwardTrace plain = forward(pp, pc, x);
  EXPECT_EQ(forced.posteriors, plain.posteriors);
  EXPECT_EQ(forced.logits, plain.logits);

  // Backward through the forced trace matches the plain network and leaves the gates untouched.
  Matrix d = random_matrix(5, 3, rng);
  const Gradients gf = backward(hp, hc, forced, d);
  const Gradients gp = backward(pp, pc, plain, d);
  EXPECT_EQ(gf.hidden, gp.hidden);
  EXPECT_EQ(gf.output, gp.output);
  EXPECT_EQ(gf.gate_transform, Matrix(6, 6));
}

TEST(Forward, DeterministicAndValidated) {
  const ModelConfig c = highway_config(3, 4, 3, 2);
  const Parameters p = init_params(c, 1);
  Rng rng(0);
  const Matrix x = random_matrix(3, 3, rng);
  EXPECT_EQ(forward(p, c, x).posteriors, forward(p, c, x).posteriors);
  EXPECT_THROW(forward(p, c, Matrix(2, 4)), ShapeError);
  EXPECT_THROW(forward(p, c, x, 0.0), ParameterError);
  EXPECT_THROW(forward(p, highway_config(3, 5, 3, 2), x), ConsistencyError);
}

TEST(Forward, NonFiniteInputReportsLayer) {
  const ModelConfig c = highway_config(3, 4, 3, 2);
  const Parameters p = init_params(c, 1);
  Matrix x(1, 3);
  x(0, 1) = INFINITY;
  try {
    forward(p, c, x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
}

TEST(PackWeights, ShapeAndSplit) {
  const ModelConfig c = highway_config(4, 5, 3, 3);
  const Parameters p = init_params(c, 2);
  const Matrix packed = pack_weights(p, c, 2);
  EXPECT_EQ(packed.rows(), 15u);
  EXPECT_EQ(packed.cols(), 5u);
  Rng rng(1);
  const Matrix h = random_matrix(3, 5, rng);
  const Matrix joint = matmul_nt(h, packed);
  EXPECT_EQ(column_slice(joint, 0, 5), matmul_nt(h, p.hidden[1].weight));
  EXPECT_EQ(column_slice(joint, 5, 5), matmul_nt(h, p.gate_transform));
  EXPECT_EQ(column_slice(joint, 10, 5), matmul_nt(h, p.gate_carry));
}

TEST(PackWeights, RejectsUngatedLayers) {
  const ModelConfig c = highway_config(4, 5, 3, 3);
  const Parameters p = init_params(c, 2);
  EXPECT_THROW(pack_weights(p, c, 1), ConfigError);
  EXPECT_THROW(pack_weights(p, c, 4), ConfigError);
  const ModelConfig plain = plain_config(4, 5, 3, 3);
  EXPECT_THROW(pack_weights(init_params(plain, 0), plain, 2), ConfigError);
  const ModelConfig constrained = highway_config(4, 5, 3, 3, {true, true, true});
  EXPECT_THROW(pack_weights(init_params(constrained, 0), constrained, 2), ConfigError);
}

TEST(PackWeights, PackedForwardMatchesSeparateProducts) {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelConfig c = highway_config(3 + trial % 3, 4 + trial, 2 + trial % 4, 3);
    const Parameters p = init_params(c, 100 + trial);
    const Matrix x = random_matrix(4, c.input_dim, rng);
    const ForwardTrace separate = forward(p, c, x);
    const ForwardTrace packed = forward(p, c, x, 1.0, {.packed = true});
    EXPECT_LE(max_abs_diff(separate.posteriors, packed.posteriors), 1e-15);
  }
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  const ModelConfig c = highway_config(3, 4, 3, 5);
  const Parameters p = init_params(c, 1);
  Rng rng(2);
  const ForwardTrace tr = forward(p, c, random_matrix(4, 3, rng));
  const Gradients g = backward(p, c, tr, Matrix(4, 5));
  EXPECT_EQ(g, zeros_like(p));
}

TEST(Backward, OutputLayerGradientIsOuterProduct) {
  const ModelConfig c = highway_config(3, 4, 2, 3);
  const Parameters p = init_params(c, 5);
  Rng rng(5);
  const ForwardTrace tr = forward(p, c, random_matrix(2, 3, rng));
  const Matrix d = random_matrix(2, 3, rng);
  const Gradients g = backward(p, c, tr, d);
  const Matrix& h = tr.layers.back().out;
  for (std::size_t j = 0; j < 3; ++j) {
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_DOUBLE_EQ(g.output.weight(j, k), d(0, j) * h(0, k) + d(1, j) * h(1, k));
    }
    EXPECT_DOUBLE_EQ(g.output.bias(0, j), d(0, j) + d(1, j));
  }
}

// Loss = Σ_ij R_ij z_ij for a fixed random R, so dLoss/dlogits = R.
double linear_logit_loss(const Parameters& p, const ModelConfig& c, const Matrix& x, const Matrix& r) {
  const Matrix z = forward(p, c, x).logits;
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += z.values()[i] * r.values()[i];
  return s;
}

TEST(Backward, MatchesFiniteDifferencesForAllGateVariants) {
  const GateConfig gates[] = {{true, true, false}, {true, true, true}, {true, false, false}, {false, true, false}};
  Rng rng(77);
  for (const auto& gate : gates) {
    const ModelConfig c = highway_config(4, 6, 3, 5, gate);
    Parameters p = init_params(c, 9);
    for (auto& layer : p.hidden)
      for (double& b : layer.bias.values()) b = rng.uniform(-0.5, 0.5);
    const Matrix x = random_matrix(4, 4, rng);
    const Matrix r = random_matrix(4, 5, rng);
    const Gradients g = backward(p, c, forward(p, c, x), r);
    const double err = test::parameter_gradient_error(
        p, g, [&](const Parameters& q) { return linear_logit_loss(q, c, x, r); });
    EXPECT_LT(err, 1e-6) << "transform=" << gate.transform_enabled << " carry=" << gate.carry_enabled
                         << " constrained=" << gate.constrained;
  }
}

TEST(Backward, SoftmaxCrossEntropyThroughNetwork) {
  const ModelConfig c = highway_config(5, 7, 3, 5);
  const Parameters p = init_params(c, 31);
  Rng rng(31);
  const Matrix x = random_matrix(4, 5, rng);
  const std::vector<std::size_t> labels{0, 4, 2, 2};
  auto loss = [&](const Parameters& q) { return ce_loss(forward(q, c, x).posteriors, labels).value; };
  const ForwardTrace tr = forward(p, c, x);
  const Gradients g = backward(p, c, tr, ce_loss(tr.posteriors, labels).dlogits);
  EXPECT_LT(test::parameter_gradient_error(p, g, loss), 1e-6);
}

TEST(Backward, TiedGateGradientSumsLayerContributions) {
  // With L = 2 only one layer uses the gates; with L = 4 three layers do. The
  // deeper network's gate gradient must still match finite differences of the
  // shared matrices.
  Rng rng(13);
  for (std::size_t layers : {2u, 4u}) {
    const ModelConfig c = highway_config(3, 5, layers, 4);
    const Parameters p = init_params(c, 40 + layers);
    const Matrix x = random_matrix(3, 3, rng);
    const Matrix r = random_matrix(3, 4, rng);
    const Gradients g = backward(p, c, forward(p, c, x), r);
    auto shared = [&](bool transform) {
      const Matrix& at = transform ? p.gate_transform : p.gate_carry;
      return test::central_difference(at, [&](const Matrix& w) {
        Parameters q = p;
        (transform ? q.gate_transform : q.gate_carry) = w;
        return linear_logit_loss(q, c, x, r);
      });
    };
    EXPECT_LT(test::max_relative_error(g.gate_transform, shared(true)), 1e-6);
    EXPECT_LT(test::max_relative_error(g.gate_carry, shared(false)), 1e-6);
  }
}

TEST(Backward, RejectsMismatchedTrace) {
  const ModelConfig c = highway_config(3, 4, 3, 2);
  const ModelConfig other = highway_config(3, 4, 2, 2);
  const Parameters p = init_params(c, 1);
  Rng rng(1);
  const ForwardTrace tr = forward(init_params(other, 1), other, random_matrix(2, 3, rng));
  EXPECT_THROW(backward(p, c, tr, Matrix(2, 2)), ConsistencyError);
  const ForwardTrace ok = forward(p, c, random_matrix(2, 3, rng));
  EXPECT_THROW(backward(p, c, ok, Matrix(3, 2)), ShapeError);
}

}  // namespace
}  // namespace hdnn
