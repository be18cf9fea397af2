// Command-line front end: data generation, CE / teacher-student / sMBR
// training, gate adaptation, evaluation, gradient checking and parameter
// counting.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "hdnn/hdnn.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ArchOptions {
  std::string arch = "highway";
  std::size_t hidden = 32;
  std::size_t layers = 4;
  bool no_transform = false;
  bool no_carry = false;
  bool constrained = false;

  void add_to(CLI::App* app) {
    app->add_option("--arch", arch, "Architecture")->check(CLI::IsMember({"plain", "highway"}));
    app->add_option("--hidden", hidden, "Hidden units per layer (H)")->check(CLI::PositiveNumber);
    app->add_option("--layers", layers, "Number of hidden layers (L)")->check(CLI::PositiveNumber);
    app->add_flag("--no-transform", no_transform, "Disable the transform gate (T = 1)");
    app->add_flag("--no-carry", no_carry, "Disable the carry gate (C = 0)");
    app->add_flag("--constrained", constrained, "Use C = 1 - T");
  }

  hdnn::ModelConfig config(std::size_t input_dim, std::size_t output_dim) const {
    hdnn::ModelConfig c;
    c.input_dim = input_dim;
    c.hidden_dim = hidden;
    c.num_layers = layers;
    c.output_dim = output_dim;
    c.architecture = arch == "plain" ? hdnn::Architecture::plain_dnn : hdnn::Architecture::highway;
    c.gate = {!no_transform, !no_carry, constrained};
    c.validate();
    return c;
  }
};

hdnn::ParamMask parse_mask(const std::string& spec) {
  if (spec == "all") return hdnn::ParamMask::all();
  hdnn::ParamMask m{false, false, false};
  std::stringstream ss(spec);
  for (std::string part; std::getline(ss, part, ',');) {
    if (part == "hidden") m.hidden = true;
    else if (part == "gates") m.gates = true;
    else if (part == "output") m.output = true;
    else throw hdnn::ConfigError("unknown parameter group '" + part + "' (use hidden,gates,output or all)");
  }
  return m;
}

std::string mask_string(const hdnn::ParamMask& m) {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ',';
    s += name;
  };
  add(m.hidden, "hidden");
  add(m.gates, "gates");
  add(m.output, "output");
  return s;
}

json config_json(const hdnn::ModelConfig& c) {
  return {{"input_dim", c.input_dim},
          {"hidden_dim", c.hidden_dim},
          {"num_layers", c.num_layers},
          {"output_dim", c.output_dim},
          {"architecture", std::string(hdnn::to_string(c.architecture))},
          {"transform", c.gate.transform_enabled},
          {"carry", c.gate.carry_enabled},
          {"constrained", c.gate.constrained},
          {"param_count", hdnn::param_count(c)}};
}

json metrics_json(const hdnn::EpochMetrics& m) {
  json j = {{"epoch", m.epoch},
            {"objective", std::string(hdnn::to_string(m.objective))},
            {"loss", m.loss},
            {"fer", m.fer}};
  if (m.expected_accuracy) j["expected_accuracy"] = *m.expected_accuracy;
  return j;
}

/// Snapshot of every option of a subcommand (given or defaulted).
json options_json(const CLI::App* app) {
  json j = json::object();
  for (const CLI::Option* opt : app->get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    // Effective value after the last-wins policy, typed when it parses as JSON.
    std::string value = opt->count() > 0 ? opt->as<std::string>() : opt->get_default_str();
    if (opt->get_expected_min() == 0) value = opt->count() > 0 ? "true" : "false";
    if (value.empty()) continue;
    json parsed = json::parse(value, nullptr, false);
    j[name] = parsed.is_discarded() || parsed.is_object() || parsed.is_array() ? json(value) : parsed;
  }
  return j;
}

std::size_t output_dim_for(const hdnn::FrameData& data, std::size_t requested) {
  std::size_t max_label = 0;
  for (std::size_t l : data.labels) max_label = std::max(max_label, l);
  if (requested == 0) return max_label + 1;
  if (max_label >= requested) throw hdnn::ConfigError("labels exceed --output classes");
  return requested;
}

std::vector<hdnn::LatticeFile> load_lattice_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw hdnn::Error("lattice directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".lat") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw hdnn::Error("no .lat files in " + dir.string());
  std::vector<hdnn::LatticeFile> out;
  for (const auto& f : files) out.push_back(hdnn::load_lattice(f));
  return out;
}

/// Reads `key = value` lines into `--key=value` arguments. Underscores in
/// keys are accepted for dashes.
std::vector<std::string> config_file_args(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CLI::FileError::Missing(path.string());
  std::vector<std::string> args;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw CLI::ConversionError("config line without '=': " + line);
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    args.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  return args;
}

/// Expands `--config FILE` so file values come first and explicit flags,
/// which appear later, take precedence.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string file;
    std::size_t span = 0;
    if (args[i] == "--config" && i + 1 < args.size()) {
      file = args[i + 1];
      span = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
      span = 1;
    } else {
      continue;
    }
    const auto extra = config_file_args(file);
    args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + span));
    // Insert right after the subcommand name so the file's
    // values precede every explicit flag.
    const std::size_t at = std::min<std::size_t>(1, args.size());
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), extra.begin(), extra.end());
    return args;
  }
  return args;
}

struct ManifestTarget {
  std::string path;
  bool disabled = false;

  void add_to(CLI::App* app) {
    app->add_option("--manifest", path, "Run manifest path (JSON)");
    app->add_flag("--no-manifest", disabled, "Do not write a run manifest");
  }

  void write(hdnn::RunManifest m, const std::string& fallback) const {
    if (disabled) return;
    m.finished = std::chrono::system_clock::now();
    hdnn::write_manifest_atomically(m, path.empty() ? fallback : path);
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hdnn: highway deep neural network training toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();

  std::uint64_t seed = 0;
  std::string metrics_path;
  auto add_seed = [&](CLI::App* sub) {
    sub->add_option("--seed", seed, "Random seed (falls back to $HDNN_SEED)")->envname("HDNN_SEED");
  };
  auto add_config = [](CLI::App* sub) {
    sub->add_option("--config", "Config file of 'key = value' lines; flags override it");
  };

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic Gaussian frame set (and optional lattices)");
  hdnn::DatasetSpec dspec;
  hdnn::UtteranceSpec uspec;
  std::string gen_out, lattice_dir;
  double shift = 0.0;
  std::size_t utterances = 0;
  gen->add_option("--out", gen_out, "Output frame file")->required();
  gen->add_option("--classes", dspec.num_classes, "Number of classes (J)")->check(CLI::PositiveNumber);
  gen->add_option("--dim", dspec.feature_dim, "Feature dimension")->check(CLI::PositiveNumber);
  gen->add_option("--frames-per-class", dspec.frames_per_class, "Frames per class")->check(CLI::PositiveNumber);
  gen->add_option("--mean-scale", dspec.mean_scale, "Std. dev. of class-mean coordinates");
  gen->add_option("--noise", dspec.noise_stddev, "Within-class noise std. dev.");
  gen->add_option("--shift", shift, "Constant domain shift added to every feature");
  gen->add_option("--class-seed", dspec.class_seed, "Seed for the class means");
  gen->add_option("--utterances", utterances, "Generate this many utterances with lattices instead of i.i.d. frames");
  gen->add_option("--frames-per-utt", uspec.frames_per_utterance, "Frames per utterance")->check(CLI::PositiveNumber);
  gen->add_option("--confusions", uspec.confusion_size, "Max states per lattice frame")->check(CLI::Range(1, 3));
  gen->add_option("--lattice-dir", lattice_dir, "Directory for utt_NNNN.lat files (with --utterances)");
  add_seed(gen);
  add_config(gen);
  ManifestTarget gen_manifest;
  gen_manifest.add_to(gen);

  // shared training options
  ArchOptions arch;
  std::string data_path, model_out, init_model, teacher_path, update = "all";
  std::size_t output_classes = 0;
  hdnn::TrainConfig tcfg;
  auto add_train_common = [&](CLI::App* sub) {
    sub->add_option("--data", data_path, "Training frame file")->required()->check(CLI::ExistingFile);
    sub->add_option("--model-out", model_out, "Where to write the trained model")->required();
    sub->add_option("--lr", tcfg.learning_rate, "Learning rate per sample");
    sub->add_option("--epochs", tcfg.epochs, "Training epochs")->check(CLI::PositiveNumber);
    sub->add_option("--batch", tcfg.batch_size, "Minibatch size")->check(CLI::PositiveNumber);
    sub->add_option("--momentum", tcfg.momentum_later, "Momentum after the first epoch");
    sub->add_option("--update", update, "Parameter groups to update: all or hidden,gates,output");
    sub->add_option("--metrics", metrics_path, "Append per-epoch metrics to this CSV");
    add_seed(sub);
    add_config(sub);
  };

  auto* train = app.add_subcommand("train", "Cross-entropy training");
  add_train_common(train);
  arch.add_to(train);
  train->add_option("--output", output_classes, "Number of output classes (default: max label + 1)");
  train->add_option("--init-model", init_model, "Continue from this model instead of a fresh init")
      ->check(CLI::ExistingFile);
  ManifestTarget train_manifest;
  train_manifest.add_to(train);

  auto* distill = app.add_subcommand("distill", "Teacher-student training (KL, or hybrid KL + q*CE)");
  add_train_common(distill);
  arch.add_to(distill);
  distill->add_option("--teacher", teacher_path, "Teacher model")->required()->check(CLI::ExistingFile);
  distill->add_option("--temperature", tcfg.temperature, "Softmax temperature for teacher and student")
      ->check(CLI::PositiveNumber);
  distill->add_option("--q", tcfg.q, "CE interpolation weight (0 = pure KL)")->check(CLI::NonNegativeNumber);
  ManifestTarget distill_manifest;
  distill_manifest.add_to(distill);

  auto* smbr = app.add_subcommand("smbr", "Sequence training with the sMBR criterion");
  add_train_common(smbr);
  std::string smoothing = "ce";
  smbr->add_option("--init-model", init_model, "Model to sequence-train")->required()->check(CLI::ExistingFile);
  smbr->add_option("--lattices", lattice_dir, "Directory of .lat files covering the frame file in order")
      ->required();
  smbr->add_option("--smoothing", smoothing, "Frame-level regularizer")->check(CLI::IsMember({"ce", "kl"}));
  smbr->add_option("--p", tcfg.p, "Smoothing weight")->check(CLI::NonNegativeNumber);
  smbr->add_option("--k", tcfg.acoustic_scale, "Acoustic scale")->check(CLI::PositiveNumber);
  smbr->add_option("--teacher", teacher_path, "Teacher model (kl smoothing)")->check(CLI::ExistingFile);
  ManifestTarget smbr_manifest;
  smbr_manifest.add_to(smbr);

  auto* adapt = app.add_subcommand("adapt", "Adapt a model on target-condition frames (gates only by default)");
  hdnn::AdaptConfig acfg;
  std::string labels = "hard_pseudo", adapt_update = "gates";
  adapt->add_option("--data", data_path, "Adaptation frame file")->required()->check(CLI::ExistingFile);
  adapt->add_option("--model", init_model, "Model to adapt")->required()->check(CLI::ExistingFile);
  adapt->add_option("--model-out", model_out, "Where to write the adapted model")->required();
  adapt->add_option("--lr", acfg.learning_rate, "Learning rate per sample");
  adapt->add_option("--epochs", acfg.epochs, "Adaptation epochs")->check(CLI::PositiveNumber);
  adapt->add_option("--batch", acfg.batch_size, "Minibatch size")->check(CLI::PositiveNumber);
  adapt->add_option("--labels", labels, "Label source")
      ->check(CLI::IsMember({"hard_pseudo", "soft_teacher", "oracle_hard"}));
  adapt->add_option("--teacher", teacher_path, "Teacher model (soft_teacher labels)")->check(CLI::ExistingFile);
  adapt->add_option("--update", adapt_update, "Parameter groups to update");
  adapt->add_option("--metrics", metrics_path, "Append per-epoch metrics to this CSV");
  add_seed(adapt);
  add_config(adapt);
  ManifestTarget adapt_manifest;
  adapt_manifest.add_to(adapt);

  auto* eval = app.add_subcommand("eval", "Frame error rate and mean CE of a model");
  eval->add_option("--data", data_path, "Labelled frame file")->required()->check(CLI::ExistingFile);
  eval->add_option("--model", init_model, "Model file")->required()->check(CLI::ExistingFile);
  add_config(eval);
  ManifestTarget eval_manifest;
  eval_manifest.add_to(eval);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every objective's gradients");
  std::size_t repeats = 4;
  gradcheck->add_option("--repeats", repeats, "Random networks per objective")->check(CLI::PositiveNumber);
  add_seed(gradcheck);
  add_config(gradcheck);
  ManifestTarget gradcheck_manifest;
  gradcheck_manifest.add_to(gradcheck);

  auto* count = app.add_subcommand("count-params", "Print the exact parameter count of an architecture");
  ArchOptions count_arch;
  std::size_t count_input = 0, count_output = 0;
  count_arch.add_to(count);
  count->get_option("--hidden")->required();
  count->get_option("--layers")->required();
  count->add_option("--input", count_input, "Input dimension")->required()->check(CLI::PositiveNumber);
  count->add_option("--output", count_output, "Output classes")->required()->check(CLI::PositiveNumber);
  add_config(count);
  ManifestTarget count_manifest;
  count_manifest.add_to(count);

  std::vector<std::string> args;
  for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
  try {
    std::reverse(args.begin(), args.end());
    args = expand_config(std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* failed = &app;
    for (auto* sub : app.get_subcommands()) failed = sub;
    std::cerr << failed->help();
    return 2;
  }

  hdnn::RunManifest manifest;
  manifest.started = std::chrono::system_clock::now();
  manifest.seed = seed;

  try {
    CLI::App* sub = app.get_subcommands().front();
    manifest.command = sub->get_name();
    manifest.config = options_json(sub);

    if (sub == gen) {
      dspec.seed = seed;
      if (shift != 0.0) dspec.shift.assign(dspec.feature_dim, shift);
      hdnn::FrameData data;
      if (utterances > 0) {
        if (lattice_dir.empty()) throw hdnn::ConfigError("--utterances needs --lattice-dir");
        uspec.num_utterances = utterances;
        uspec.seed = seed;
        auto utts = hdnn::generate_utterances(dspec, uspec);
        fs::create_directories(lattice_dir);
        data = hdnn::concatenate_frames(utts);
        for (std::size_t i = 0; i < utts.size(); ++i) {
          char name[32];
          std::snprintf(name, sizeof name, "utt_%04zu.lat", i);
          hdnn::with_output_file(fs::path(lattice_dir) / name, [&](std::ostream& out) {
            hdnn::write_lattice(out, utts[i].lattice, utts[i].reference);
          });
        }
      } else {
        data = hdnn::generate_synthetic(dspec);
      }
      hdnn::with_output_file(gen_out, [&](std::ostream& out) { hdnn::write_frames(out, data); });
      manifest.final_metrics = {{"frames", data.size()}, {"dim", data.features.cols()}};
      std::cout << "wrote " << data.size() << " frames to " << gen_out << '\n';
      gen_manifest.write(manifest, gen_out + ".manifest.json");
      return 0;
    }

    if (sub == train || sub == distill || sub == smbr) {
      tcfg.seed = seed;
      tcfg.mask = parse_mask(update);
      const hdnn::FrameData frames = hdnn::load_frames(data_path);
      hdnn::TrainingData data;
      std::optional<hdnn::TeacherModel> teacher;
      if (!teacher_path.empty()) {
        auto t = hdnn::load_model(teacher_path);
        teacher = hdnn::TeacherModel{std::move(t.params), t.config};
      }
      hdnn::Parameters params;
      hdnn::ModelConfig config;
      if (!init_model.empty()) {
        auto m = hdnn::load_model(init_model);
        params = std::move(m.params);
        config = m.config;
        if (config.input_dim != frames.features.cols()) throw hdnn::ConfigError("model input_dim differs from data");
      } else {
        std::size_t out_dim = output_dim_for(frames, output_classes);
        if (teacher) out_dim = teacher->config.output_dim;
        config = arch.config(frames.features.cols(), out_dim);
        params = hdnn::init_params(config, seed);
      }

      if (sub == train) {
        tcfg.objective = hdnn::Objective::ce;
        data.frames = frames;
      } else if (sub == distill) {
        tcfg.objective = tcfg.q > 0.0 ? hdnn::Objective::hybrid : hdnn::Objective::kd;
        data.frames = frames;
      } else {
        tcfg.objective = smoothing == "kl" ? hdnn::Objective::smbr_kl : hdnn::Objective::smbr_ce;
        if (tcfg.objective == hdnn::Objective::smbr_ce) teacher.reset();
        data.utterances = hdnn::assemble_utterances(frames, load_lattice_dir(lattice_dir));
      }

      const auto result = hdnn::train(std::move(params), config, data, tcfg, teacher ? &*teacher : nullptr);
      hdnn::save_model(result.params, config, model_out);
      if (!metrics_path.empty()) {
        hdnn::append_metrics_csv(metrics_path, result.history);
        manifest.metric_files.push_back(metrics_path);
      }
      manifest.config["model"] = config_json(config);
      manifest.config["update"] = mask_string(tcfg.mask);
      manifest.final_metrics = metrics_json(result.history.back());
      for (const auto& m : result.history) hdnn::write_metrics_row(std::cout, m);
      ManifestTarget& target = sub == train ? train_manifest : sub == distill ? distill_manifest : smbr_manifest;
      target.write(manifest, model_out + ".manifest.json");
      return 0;
    }

    if (sub == adapt) {
      acfg.seed = seed;
      acfg.mask = parse_mask(adapt_update);
      acfg.label_source = hdnn::parse_label_source(labels);
      const hdnn::FrameData frames = hdnn::load_frames(data_path);
      auto model = hdnn::load_model(init_model);
      std::optional<hdnn::TeacherModel> teacher;
      if (!teacher_path.empty()) {
        auto t = hdnn::load_model(teacher_path);
        teacher = hdnn::TeacherModel{std::move(t.params), t.config};
      }
      const auto result = hdnn::adapt(model.params, model.config, frames, acfg, teacher ? &*teacher : nullptr);
      hdnn::save_model(result.params, model.config, model_out);
      if (!metrics_path.empty()) {
        hdnn::append_metrics_csv(metrics_path, result.history);
        manifest.metric_files.push_back(metrics_path);
      }
      manifest.config["model"] = config_json(model.config);
      manifest.final_metrics = metrics_json(result.history.back());
      for (const auto& m : result.history) hdnn::write_metrics_row(std::cout, m);
      adapt_manifest.write(manifest, model_out + ".manifest.json");
      return 0;
    }

    if (sub == eval) {
      const auto model = hdnn::load_model(init_model);
      const auto ev = hdnn::evaluate(model.params, model.config, hdnn::load_frames(data_path));
      std::cout << "fer " << hdnn::format_double(ev.frame_error_rate) << "\nce " << hdnn::format_double(ev.mean_ce)
                << '\n';
      manifest.final_metrics = {{"fer", ev.frame_error_rate}, {"ce", ev.mean_ce}};
      eval_manifest.write(manifest, "hdnn-eval.manifest.json");
      return 0;
    }

    if (sub == gradcheck) {
      const auto reports = hdnn::run_gradcheck_suite(seed, repeats);
      bool ok = true;
      json cases = json::array();
      for (const auto& r : reports) {
        std::cout << (r.passed() ? "PASS " : "FAIL ") << r.name << " max_rel_err=" << r.max_relative_error
                  << " tol=" << r.tolerance << " entries=" << r.entries << '\n';
        ok = ok && r.passed();
        cases.push_back({{"name", r.name}, {"max_relative_error", r.max_relative_error}, {"passed", r.passed()}});
      }
      manifest.final_metrics = {{"passed", ok}, {"cases", cases}};
      gradcheck_manifest.write(manifest, "hdnn-gradcheck.manifest.json");
      return ok ? 0 : 1;
    }

    if (sub == count) {
      const auto config = count_arch.config(count_input, count_output);
      const auto n = hdnn::param_count(config);
      std::cout << n << '\n';
      manifest.final_metrics = {{"param_count", n}};
      count_manifest.write(manifest, "hdnn-count-params.manifest.json");
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
