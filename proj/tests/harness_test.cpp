#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "hdnn/model_io.hpp"
#include "hdnn/run_io.hpp"
#include "hdnn/synthetic.hpp"
#include "hdnn/text_io.hpp"
#include "test_util.hpp"

namespace hdnn {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("hdnn_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

TEST(Synthetic, DeterministicAndBalanced) {
  DatasetSpec spec;
  spec.seed = 3;
  const FrameData a = generate_synthetic(spec);
  const FrameData b = generate_synthetic(spec);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  ASSERT_EQ(a.size(), spec.num_classes * spec.frames_per_class);
  EXPECT_EQ(a.features.cols(), spec.feature_dim);
  std::vector<std::size_t> counts(spec.num_classes, 0);
  for (std::size_t l : a.labels) ++counts.at(l);
  for (std::size_t c : counts) EXPECT_EQ(c, spec.frames_per_class);
  spec.seed = 4;
  EXPECT_FALSE(generate_synthetic(spec).features == a.features);
}

TEST(Synthetic, WellSeparatedClassesAreNearlyPerfectlyClassifiable) {
  DatasetSpec spec;
  spec.num_classes = 5;
  spec.feature_dim = 10;
  spec.frames_per_class = 100;
  spec.mean_scale = 6.0;
  spec.noise_stddev = 1.0;
  spec.class_seed = 2;
  const FrameData data = generate_synthetic(spec);
  const Matrix means = class_means(spec);
  std::size_t errors = 0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      double d = 0.0;
      for (std::size_t k = 0; k < spec.feature_dim; ++k) d += std::pow(data.features(r, k) - means(c, k), 2);
      if (d < best_d) best_d = d, best = c;
    }
    if (best != data.labels[r]) ++errors;
  }
  EXPECT_LT(static_cast<double>(errors) / static_cast<double>(data.size()), 0.05);
}

TEST(Synthetic, ShiftMovesEveryFrame) {
  DatasetSpec spec;
  const FrameData base = generate_synthetic(spec);
  spec.shift.assign(spec.feature_dim, 2.0);
  const FrameData shifted = generate_synthetic(spec);
  EXPECT_EQ(shifted.labels, base.labels);
  for (std::size_t i = 0; i < base.features.size(); ++i) {
    EXPECT_NEAR(shifted.features.values()[i] - base.features.values()[i], 2.0, 1e-12);
  }
  spec.shift.assign(3, 1.0);
  EXPECT_THROW(generate_synthetic(spec), ConfigError);
}

TEST(Synthetic, UtterancesMatchTheirLattices) {
  DatasetSpec dspec;
  UtteranceSpec uspec;
  uspec.num_utterances = 5;
  const auto utts = generate_utterances(dspec, uspec);
  ASSERT_EQ(utts.size(), 5u);
  for (const auto& u : utts) {
    EXPECT_EQ(u.features.rows(), uspec.frames_per_utterance);
    EXPECT_EQ(u.lattice.num_frames(), uspec.frames_per_utterance);
    // The reference path is always in its confusion lattice.
    const auto r = smbr_forward_backward(u.lattice, u.reference, Matrix(u.reference.size(), dspec.num_classes), 1.0);
    EXPECT_GT(r.expected_accuracy, 0.0);
  }
}

TEST(ModelFile, RoundTripIsBitExact) {
  for (GateConfig gate : {GateConfig{true, true, false}, GateConfig{true, true, true}, GateConfig{true, false, false},
                          GateConfig{false, true, false}}) {
    const ModelConfig cfg = test::highway_config(5, 7, 4, 3, gate);
    const Parameters p = init_params(cfg, 9);
    const auto bytes = encode_model(p, cfg);
    EXPECT_EQ(bytes.size(), kModelHeaderBytes + 8 * param_count(cfg));
    EXPECT_EQ(std::memcmp(bytes.data(), "HDN1", 4), 0);
    const LoadedModel m = decode_model(bytes);
    EXPECT_EQ(m.config, cfg);
    for_each_array_pair(m.params, p, [](ParamGroup, const Matrix& a, const Matrix& b) { EXPECT_TRUE(a == b); });
    EXPECT_EQ(encode_model(m.params, m.config), bytes);
  }
}

TEST(ModelFile, HeaderLayoutIsLittleEndian) {
  const ModelConfig cfg = test::plain_config(600, 2048, 6, 3972);
  const auto bytes = encode_model(zero_parameters(cfg), cfg);
  auto u32 = [&](std::size_t off) {
    return std::uint32_t(bytes[off]) | std::uint32_t(bytes[off + 1]) << 8 | std::uint32_t(bytes[off + 2]) << 16 |
           std::uint32_t(bytes[off + 3]) << 24;
  };
  EXPECT_EQ(u32(4), 1u);
  EXPECT_EQ(u32(8), 600u);
  EXPECT_EQ(u32(12), 2048u);
  EXPECT_EQ(u32(16), 6u);
  EXPECT_EQ(u32(20), 3972u);
  EXPECT_EQ(u32(24), 0u);
  EXPECT_EQ(u32(32), 30351236u);
}

TEST(ModelFile, CorruptionIsReportedWithOffset) {
  const ModelConfig cfg = test::highway_config(3, 4, 2, 2);
  const auto good = encode_model(init_params(cfg, 1), cfg);

  auto offset_of = [](const std::vector<unsigned char>& bytes) -> std::size_t {
    try {
      decode_model(bytes);
    } catch (const FormatError& e) {
      return e.offset();
    }
    ADD_FAILURE() << "expected FormatError";
    return SIZE_MAX;
  };
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(offset_of(bad_magic), 0u);
  auto bad_count = good;
  bad_count[32] ^= 1;
  EXPECT_EQ(offset_of(bad_count), 32u);
  auto truncated = good;
  truncated.resize(truncated.size() - 3);
  EXPECT_EQ(offset_of(truncated), truncated.size());
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(offset_of(trailing), good.size());
  auto bad_flags = good;
  bad_flags[28] = 0;  // highway with both gates off
  EXPECT_THROW(decode_model(bad_flags), FormatError);
}

TEST(ModelFile, SaveAndLoadThroughDisk) {
  const fs::path dir = scratch_dir("model");
  const ModelConfig cfg = test::highway_config(4, 6, 3, 5);
  const Parameters p = init_params(cfg, 2);
  save_model(p, cfg, dir / "m.hdn");
  const LoadedModel m = load_model(dir / "m.hdn");
  EXPECT_EQ(m.params.gate_transform, p.gate_transform);
  EXPECT_THROW(load_model(dir / "missing.hdn"), Error);
}

TEST(LatticeFile, RoundTrip) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Lattice lat = random_lattice(1 + rng.index(6), 5, 3, 3, rng);
    ReferencePath ref(lat.num_frames());
    for (auto& s : ref) s = rng.index(5);
    std::stringstream ss;
    write_lattice(ss, lat, ref);
    const LatticeFile back = read_lattice(ss);
    EXPECT_TRUE(back.lattice == lat);
    EXPECT_EQ(back.reference, ref);
  }
}

TEST(LatticeFile, ParsesHandWrittenText) {
  std::istringstream in(
      "# two frames\n"
      "LAT 2 3\n"
      "ARC 0 1 4 -0.5\n"
      "ARC 1 2 2 0\n"
      "\n"
      "REF 4 1\n");
  const LatticeFile f = read_lattice(in);
  EXPECT_EQ(f.lattice.num_frames(), 2u);
  EXPECT_EQ(f.lattice.arc(0).state, 4u);
  EXPECT_EQ(f.lattice.arc(0).lm_logscore, -0.5);
  EXPECT_EQ(f.reference, (ReferencePath{4, 1}));
}

TEST(LatticeFile, ErrorsCarryLineNumbers) {
  auto line_of = [](const std::string& text) -> std::size_t {
    std::istringstream in(text);
    try {
      read_lattice(in);
    } catch (const FormatError& e) {
      return e.offset();
    }
    ADD_FAILURE() << "expected FormatError for: " << text;
    return 0;
  };
  EXPECT_EQ(line_of("LAT 1\n"), 1u);
  EXPECT_EQ(line_of("LAT 1 2\nARC 0 1 x 0\nREF 0\n"), 2u);
  EXPECT_EQ(line_of("LAT 1 2\nARC 0 1 0 0\nNODE 3\n"), 3u);
  EXPECT_EQ(line_of("LAT 2 2\nARC 0 1 0 0\nREF 0 0\n"), 3u);  // structurally invalid
  EXPECT_GT(line_of("LAT 1 2\nARC 0 1 0 0\n"), 0u);             // missing REF
  EXPECT_GT(line_of("LAT 1 2\nARC 0 1 0 0\nREF 0 0\n"), 0u);    // REF length
}

TEST(FrameFile, RoundTripIsExact) {
  DatasetSpec spec;
  spec.frames_per_class = 5;
  const FrameData data = generate_synthetic(spec);
  std::stringstream ss;
  write_frames(ss, data);
  const FrameData back = read_frames(ss);
  EXPECT_EQ(back.features, data.features);
  EXPECT_EQ(back.labels, data.labels);
}

TEST(FrameFile, RejectsMalformedInput) {
  for (const char* text : {"FRAMES 2 2\n0 1 2\n", "FRAMES 1 2\n0 1\n", "FRAMES 1 2\n0 1 zz\n",
                           "FRAMES 1 2\n0 1 2\n1 1 1\n", "BOGUS\n"}) {
    std::istringstream in(text);
    EXPECT_THROW(read_frames(in), FormatError) << text;
  }
}

TEST(AssembleUtterances, SplitsFramesByLattice) {
  FrameData frames{Matrix{{1}, {2}, {3}}, {0, 1, 1}};
  std::vector<LatticeFile> lats;
  lats.push_back({Lattice(1, 2, {{0, 1, 0, 0.0}}), {0}});
  lats.push_back({Lattice(2, 3, {{0, 1, 1, 0.0}, {1, 2, 1, 0.0}}), {1, 1}});
  const auto utts = assemble_utterances(frames, lats);
  ASSERT_EQ(utts.size(), 2u);
  EXPECT_EQ(utts[1].features, (Matrix{{2}, {3}}));

  auto wrong_ref = lats;
  wrong_ref[1].reference = {1, 0};
  EXPECT_THROW(assemble_utterances(frames, wrong_ref), ConsistencyError);
  lats.pop_back();
  EXPECT_THROW(assemble_utterances(frames, lats), ConsistencyError);
}

TEST(MetricsCsv, HeaderOnceAndOptionalColumn) {
  const fs::path dir = scratch_dir("metrics");
  const fs::path csv = dir / "m.csv";
  EpochMetrics a{0, Objective::ce, 1.5, 0.25, std::nullopt};
  EpochMetrics b{1, Objective::smbr_ce, 0.5, 0.125, 0.75};
  append_metrics_csv(csv, {a});
  append_metrics_csv(csv, {b});
  std::ifstream in(csv);
  std::string l1, l2, l3, extra;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  EXPECT_EQ(l1, "epoch,objective,loss,fer,expected_accuracy");
  EXPECT_EQ(l2, "0,ce,1.5,0.25,");
  EXPECT_EQ(l3, "1,smbr_ce,0.5,0.125,0.75");
  EXPECT_FALSE(std::getline(in, extra));
}

TEST(RunManifest, WrittenAtomicallyAsJson) {
  const fs::path dir = scratch_dir("manifest");
  RunManifest m;
  m.command = "train";
  m.config = {{"lr", 0.01}};
  m.seed = 7;
  m.started = m.finished = std::chrono::system_clock::time_point{};
  m.metric_files = {"m.csv"};
  m.final_metrics = {{"fer", 0.1}};
  write_manifest_atomically(m, dir / "run.json");
  EXPECT_FALSE(fs::exists(dir / "run.json.tmp"));
  std::ifstream in(dir / "run.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["command"], "train");
  EXPECT_EQ(j["seed"], 7);
  EXPECT_EQ(j["started"], "1970-01-01T00:00:00Z");
  EXPECT_EQ(j["config"]["lr"], 0.01);
  EXPECT_EQ(j["metric_files"][0], "m.csv");
}

}  // namespace
}  // namespace hdnn
