#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "spotdiff/corpus.hpp"
#include "spotdiff/error.hpp"
#include "spotdiff/evaluation.hpp"
#include "spotdiff/log.hpp"
#include "spotdiff/training.hpp"

namespace fs = std::filesystem;
using namespace spotdiff;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::string> mode;
  std::optional<std::string> ablate;
  std::optional<int> steps;
  std::string corpus;
  std::string checkpoint;
  int count = 8;
  bool quiet = false;
};

// flags > environment > file > defaults
Config assemble(const Options& o) {
  Config c = o.config_path.empty() ? Config::defaults() : Config::load(o.config_path);
  c.apply_env_overrides();
  if (o.seed) c.set("seed", std::to_string(*o.seed));
  if (o.mode) c.set("decouple.mode", *o.mode);
  if (o.ablate) c.set("ablate", *o.ablate);
  if (o.steps) c.set("train.steps", std::to_string(*o.steps));
  return c;
}

void prepare_out(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw PersistenceError("cannot create output directory " + out.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw PersistenceError("cannot write " + path.string());
  f << text;
}

void write_provenance(const fs::path& out, const std::string& command, const Config& config) {
  nlohmann::json j;
  j["command"] = command;
  j["config_hash"] = config.hash();
  j["seed"] = config.get_u64("seed");
  j["config"] = config.values();
  write_text(out / "provenance.json", j.dump(2) + "\n");
}

Manifest open_corpus(const Options& o) {
  if (o.corpus.empty()) throw PersistenceError("corpus not found: pass --corpus DIR");
  return load_manifest(o.corpus);
}

ModelStack open_checkpoint(const Options& o) {
  if (o.checkpoint.empty()) throw PersistenceError("checkpoint not found: pass --checkpoint FILE");
  ModelStack stack = load_stack(o.checkpoint);
  if (o.seed) stack.config.set("seed", std::to_string(*o.seed));
  return stack;
}

/// Encoder, backbone and head stages shared by train and ablate.
ModelStack pretrain(const Config& config, const Manifest& manifest, const fs::path& out) {
  ModelStack stack = ModelStack::create(config);
  Rng rng(config.get_u64("seed") ^ 0x7072657472ULL);
  nlohmann::json stages = nlohmann::json::array();
  for (auto report : {pretrain_encoder(stack, manifest, rng), pretrain_backbone(stack, manifest, rng),
                      train_heads(stack, manifest, rng)}) {
    stages.push_back({{"stage", report.stage},
                      {"steps", report.steps},
                      {"first_loss", report.first_loss},
                      {"last_loss", report.last_loss}});
  }
  write_text(out / "stages.json", stages.dump(2) + "\n");
  return stack;
}

void write_timings(const fs::path& path, const std::vector<double>& ms) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw PersistenceError("cannot write " + path.string());
  f << "step,wall_ms\n";
  for (std::size_t i = 0; i < ms.size(); ++i) f << i + 1 << ',' << ms[i] << '\n';
}

int cmd_gen_corpus(const Options& o) {
  const Config config = assemble(o);
  prepare_out(o.out);
  const Manifest m = generate_corpus(config, config.get_u64("seed"), o.out);
  write_provenance(o.out, "gen-corpus", config);
  std::cout << "corpus: " << m.samples.size() << " samples from " << m.originals.size() << " originals -> " << o.out
            << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  const Config config = assemble(o);
  const TrainConfig tc = TrainConfig::from(config);
  const Manifest manifest = open_corpus(o);
  prepare_out(o.out);
  write_provenance(o.out, "train", config);
  ModelStack stack = pretrain(config, manifest, o.out);
  SpotDiffTrainer trainer(stack, manifest, tc);
  trainer.run(tc.steps);
  trainer.log().write_csv(fs::path(o.out) / "train_log.csv");
  write_timings(fs::path(o.out) / "timing.csv", trainer.timings());
  trainer.save(fs::path(o.out) / "checkpoint.bin");
  const auto& recs = trainer.log().records();
  if (!recs.empty()) {
    std::cout << "trained " << recs.size() << " steps, final loss " << recs.back().total << " -> " << o.out
              << "/checkpoint.bin\n";
  }
  return 0;
}

int cmd_sample(const Options& o) {
  const ModelStack stack = open_checkpoint(o);
  const Manifest manifest = open_corpus(o);
  prepare_out(o.out);
  write_provenance(o.out, "sample", stack.config);
  const int steps = o.steps.value_or(stack.config.get_int("sampler.steps"));
  const auto gens = generate_from_heldout(stack, manifest, o.count, steps, stack.config.get_u64("seed"));
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < gens.size(); ++i) {
    const std::string ref = "reference_" + std::to_string(i) + ".png";
    const std::string gen = "sample_" + std::to_string(i) + ".png";
    write_png((fs::path(o.out) / ref).string(), gens[i].reference);
    write_png((fs::path(o.out) / gen).string(), gens[i].generated);
    index.push_back({{"reference", ref}, {"sample", gen}, {"prompt", gens[i].prompt}, {"token", gens[i].token}});
  }
  write_text(fs::path(o.out) / "samples.json", index.dump(2) + "\n");
  std::cout << "wrote " << gens.size() << " samples -> " << o.out << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const ModelStack stack = open_checkpoint(o);
  const Manifest manifest = open_corpus(o);
  prepare_out(o.out);
  write_provenance(o.out, "eval", stack.config);
  const MetricsReport report = evaluate(stack, manifest, EvalOptions::from(stack.config), fs::path(o.checkpoint).filename().string());
  const std::vector<MetricsReport> reports{report};
  write_reports_csv(fs::path(o.out) / "metrics.csv", reports);
  write_reports_json(fs::path(o.out) / "metrics.json", reports);
  std::cout << format_table(reports);
  return 0;
}

int cmd_ablate(const Options& o) {
  const Config config = assemble(o);
  TrainConfig::from(config);
  const Manifest manifest = open_corpus(o);
  prepare_out(o.out);
  write_provenance(o.out, "ablate", config);
  const ModelStack stack = pretrain(config, manifest, o.out);
  const auto reports = run_ablation(stack, manifest, config.get_int("train.steps"), EvalOptions::from(config));
  write_reports_csv(fs::path(o.out) / "ablation.csv", reports);
  write_reports_json(fs::path(o.out) / "ablation.json", reports);
  std::cout << format_table(reports);
  return 0;
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kConfig:
      return 2;
    case ErrorCategory::kPersistence:
      return 3;
    default:
      return 1;
  }
}

void report_error(std::string_view category, const std::string& message) {
  std::string one_line = message;
  for (char& ch : one_line)
    if (ch == '\n') ch = ' ';
  std::cerr << "spotdiff: error category=" << category << ": " << one_line << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SpotDiff toy pipeline: corpus generation, training, sampling, evaluation, ablation"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "key = value config file");
    sub->add_option("--seed", o.seed, "seed (overrides config)");
    sub->add_option("--out", o.out, "output directory");
    sub->add_flag("--quiet", o.quiet, "warnings only");
  };
  auto training = [&](CLI::App* sub) {
    sub->add_option("--corpus", o.corpus, "corpus directory");
    sub->add_option("--mode", o.mode, "decouple mode")->check(CLI::IsMember({"sequential", "joint"}));
    sub->add_option("--ablate", o.ablate, "bypass experts")->check(CLI::IsMember({"none", "bg", "pose", "both"}));
    sub->add_option("--steps", o.steps, "SpotDiff training steps");
  };

  CLI::App* gen = app.add_subcommand("gen-corpus", "render the controlled-factor corpus");
  common(gen);
  CLI::App* train = app.add_subcommand("train", "pretrain, then train the SpotDiff stage");
  common(train);
  training(train);
  CLI::App* sample = app.add_subcommand("sample", "generate from held-out references");
  common(sample);
  sample->add_option("--corpus", o.corpus, "corpus directory");
  sample->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  sample->add_option("--count", o.count, "number of generations")->check(CLI::PositiveNumber);
  sample->add_option("--steps", o.steps, "sampler steps");
  CLI::App* eval = app.add_subcommand("eval", "write a MetricsReport for a checkpoint");
  common(eval);
  eval->add_option("--corpus", o.corpus, "corpus directory");
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint file");
  CLI::App* ablate = app.add_subcommand("ablate", "train and evaluate the four expert ablations");
  common(ablate);
  training(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("config", e.what());
    return 2;
  }

  set_log_level(o.quiet ? LogLevel::kWarn : LogLevel::kInfo);
  try {
    if (*gen) return cmd_gen_corpus(o);
    if (*train) return cmd_train(o);
    if (*sample) return cmd_sample(o);
    if (*eval) return cmd_eval(o);
    if (*ablate) return cmd_ablate(o);
  } catch (const Error& e) {
    report_error(category_name(e.category()), e.what());
    return exit_code(e.category());
  } catch (const std::exception& e) {
    report_error("runtime", e.what());
    return 1;
  }
  return 1;
}
