// Copyright 2026 The metasg Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line driver: meta-train | sample | eval | compare.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "metasg/diagnostics.hpp"
#include "metasg/error.hpp"
#include "metasg/experiment.hpp"
#include "metasg/meta_nets.hpp"
#include "metasg/meta_training.hpp"

namespace fs = std::filesystem;
using namespace metasg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitDivergence = 3;

struct Options {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::string out;
  std::string sampler;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> epochs;
  std::string checkpoint;
  std::string samples;
  std::vector<std::string> metrics;
  std::string format;
};

RunConfig resolve_config(const Options& o, const std::string& command) {
  RunConfig cfg = o.config.empty() ? preset_config(o.preset) : load_run_config(o.config, o.preset);
  if (o.seed) cfg.seed = *o.seed;
  if (o.workers) cfg.workers = *o.workers;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.steps) {
    cfg.eval.steps = *o.steps;
    if (cfg.eval.burn_in >= cfg.eval.steps) {
      cfg.eval.burn_in = cfg.eval.steps / 6;
      std::cerr << "note: burn-in reduced to " << cfg.eval.burn_in << " steps to fit --steps\n";
    }
  }
  if (!o.format.empty()) {
    if (o.format != "csv" && o.format != "binary") throw ConfigError("--format must be csv or binary");
    cfg.eval.format = o.format;
  }
  if (!o.sampler.empty()) {
    parse_sampler_kind(o.sampler);
    if (o.sampler != cfg.sampler.kind) {
      SamplerConfig fresh;
      fresh.kind = o.sampler;
      fresh.eta = cfg.sampler.eta;
      fresh.per_batch_lr = cfg.sampler.per_batch_lr;
      fresh.momentum_decay = cfg.sampler.momentum_decay;
      cfg.sampler = fresh;
    }
  }
  if (!o.checkpoint.empty()) {
    cfg.sampler.checkpoint = o.checkpoint;
    for (auto& s : cfg.compare)
      if (s.kind == "nnsghmc" && s.checkpoint.empty()) s.checkpoint = o.checkpoint;
  }
  if (!o.out.empty()) {
    cfg.out = o.out;
  } else if (cfg.out.empty()) {
    const char* root = std::getenv("METASG_OUT_ROOT");
    const std::string base = (root && *root) ? root : "runs";
    const std::string tag = cfg.preset.empty() ? "custom" : cfg.preset;
    cfg.out = (fs::path(base) / (command + "-" + tag + "-seed" + std::to_string(cfg.seed))).string();
  }
  return cfg;
}

void write_config(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  std::ofstream out(fs::path(cfg.out) / "config.json");
  if (!out) throw ConfigError("cannot write to output directory '" + cfg.out + "'");
  nlohmann::json doc = to_json(cfg);
  doc["config_hash"] = config_hash(cfg);
  out << doc.dump(2) << '\n';
}

void write_curve(const std::vector<CurvePoint>& curve, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << "step,metric,value\n" << std::setprecision(12);
  for (const auto& p : curve) out << p.step << ',' << p.metric << ',' << p.value << '\n';
}

int cmd_meta_train(const Options& o) {
  const RunConfig cfg = resolve_config(o, "meta-train");
  write_config(cfg);
  std::cerr << "meta-training (" << cfg.train.epochs << " epochs x " << cfg.train.sub_epochs
            << " updates) -> " << cfg.out << '\n';
  std::vector<TrainLogEntry> log;
  const fs::path log_path = fs::path(cfg.out) / "train_log.csv";
  try {
    TrainResult r = run_meta_train(cfg, [&](const TrainLogEntry& e) {
      log.push_back(e);
      if (e.update % 10 == 0)
        std::cerr << "  update " << e.update << " loss " << e.loss << (e.diverged ? " (diverged)" : "")
                  << '\n';
    });
    write_train_log(r.log, log_path.string());
    save_checkpoint(r.nets, (fs::path(cfg.out) / "checkpoint.json").string());
  } catch (...) {
    write_train_log(log, log_path.string());
    throw;
  }
  std::cout << "checkpoint: " << (fs::path(cfg.out) / "checkpoint.json").string() << '\n';
  return kExitOk;
}

// Resolved config without the fields that do not influence results.
nlohmann::json portable_config(const RunConfig& cfg) {
  nlohmann::json doc = to_json(cfg);
  doc.erase("out");
  doc.erase("workers");
  return doc;
}

nlohmann::json sample_metadata(const RunConfig& cfg, const SamplerConfig& sc,
                               const SamplerSpec& spec) {
  return {{"sampler", sc.kind},
          {"eta", spec.step.eta},
          {"seed", cfg.seed},
          {"config_hash", config_hash(cfg)},
          {"config", portable_config(cfg)}};
}

int cmd_sample(const Options& o) {
  const RunConfig cfg = resolve_config(o, "sample");
  write_config(cfg);
  const Task task = build_task(cfg.test_task);
  const SamplerSpec spec = resolve_sampler(cfg.sampler, task, cfg.seed, cfg.resolved_workers());
  std::cerr << "sampling " << cfg.sampler.kind << ": " << cfg.eval.chains << " chains x "
            << cfg.eval.steps << " steps -> " << cfg.out << '\n';
  RunResult r = run_sampler(task, spec, cfg.eval, cfg.seed, cfg.resolved_workers());
  r.samples.metadata = sample_metadata(cfg, cfg.sampler, spec);
  const bool binary = cfg.eval.format == "binary";
  const fs::path path = fs::path(cfg.out) / (binary ? "samples.bin" : "samples.csv");
  if (binary) write_samples_binary(r.samples, path.string());
  else write_samples_csv(r.samples, path.string());
  write_curve(r.curve, fs::path(cfg.out) / "curve.csv");
  std::cout << "samples: " << path.string() << " (" << r.samples.size() << " draws)\n";
  for (const auto& [k, v] : r.final_metrics) std::cout << "  " << k << " = " << v << '\n';
  return kExitOk;
}

int cmd_eval(const Options& o) {
  if (o.samples.empty()) throw ConfigError("eval needs --samples PATH");
  if (o.metrics.empty()) throw ConfigError("eval needs at least one --metric (kl, ess, nll)");
  SampleSet samples = read_samples(o.samples);
  RunConfig cfg;
  if (!o.config.empty()) {
    cfg = load_run_config(o.config, o.preset);
  } else if (samples.metadata.contains("config")) {
    cfg = run_config_from_json(samples.metadata.at("config"));
  } else if (!o.preset.empty()) {
    cfg = preset_config(o.preset);
  } else {
    throw ConfigError("samples carry no metadata; pass --config or --preset for the target");
  }
  const std::string hash = samples.metadata.value("config_hash", config_hash(cfg));
  const fs::path out = o.out.empty() ? fs::path(o.samples).parent_path() : fs::path(o.out);
  if (!out.empty()) fs::create_directories(out);

  std::vector<MetricRow> rows;
  std::optional<Task> task;
  auto get_task = [&]() -> const Task& {
    if (!task) task = build_task(cfg.test_task);
    return *task;
  };
  for (const auto& m : o.metrics) {
    if (m == "kl") {
      const Task& t = get_task();
      if (!t.has_truth) throw ConfigError("metric 'kl' needs a Gaussian target with known moments");
      rows.push_back({"kl", fit_gaussian_kl(samples, t.mean, t.cov), hash});
    } else if (m == "ess") {
      samples.validate();
      double total = 0.0;
      std::size_t n = 0;
      for (auto id : samples.chain_ids()) {
        const Mat chain = samples.chain_draws(id);
        if (chain.rows() < 10) continue;
        total += ess(chain);
        ++n;
      }
      if (n == 0) throw ConfigError("metric 'ess' needs at least 10 draws per chain");
      rows.push_back({"ess", total / static_cast<double>(n), hash});
    } else if (m == "nll") {
      const Task& t = get_task();
      if (!t.bnn) throw ConfigError("metric 'nll' needs a classifier target");
      const ClassifyResult r = classify_eval(samples, *t.bnn, *t.test_data);
      rows.push_back({"test_error", r.error_rate, hash});
      rows.push_back({"test_nll", r.mean_nll, hash});
    } else {
      throw ConfigError("unknown metric '" + m + "' (expected kl, ess or nll)");
    }
  }
  const fs::path metrics_path = out / "metrics.csv";
  append_metrics_csv(metrics_path.string(), rows);
  std::cout << std::left << std::setw(12) << "metric" << "value\n";
  for (const auto& r : rows) std::cout << std::setw(12) << r.metric << std::setprecision(8) << r.value << '\n';
  return kExitOk;
}

int cmd_compare(const Options& o) {
  const RunConfig cfg = resolve_config(o, "compare");
  if (cfg.compare.size() < 2) throw ConfigError("compare needs at least 2 sampler specs");
  write_config(cfg);
  const Task task = build_task(cfg.test_task);
  const std::size_t workers = cfg.resolved_workers();
  std::ofstream curves(fs::path(cfg.out) / "curves.csv");
  std::ofstream summary(fs::path(cfg.out) / "summary.csv");
  if (!curves || !summary) throw ConfigError("cannot write to '" + cfg.out + "'");
  curves << "sampler,seed,step,metric,value\n" << std::setprecision(12);
  summary << "sampler,seed,metric,value\n" << std::setprecision(12);
  const std::size_t seeds = std::max<std::size_t>(cfg.eval.seeds, 1);
  for (std::size_t i = 0; i < seeds; ++i) {
    const std::uint64_t seed = cfg.seed + i;
    for (const auto& sc : cfg.compare) {
      std::cerr << "  " << sc.name() << " seed " << seed << '\n';
      const SamplerSpec spec = resolve_sampler(sc, task, seed, workers);
      const RunResult r = run_sampler(task, spec, cfg.eval, seed, workers);
      for (const auto& p : r.curve)
        curves << sc.name() << ',' << seed << ',' << p.step << ',' << p.metric << ',' << p.value << '\n';
      for (const auto& [k, v] : r.final_metrics) {
        summary << sc.name() << ',' << seed << ',' << k << ',' << v << '\n';
        std::cout << std::left << std::setw(10) << sc.name() << " seed " << seed << "  "
                  << std::setw(10) << k << ' ' << v << '\n';
      }
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metasg: meta-learned stochastic-gradient MCMC samplers"};
  app.require_subcommand(1, 1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run configuration (JSON)");
    sub->add_option("--preset", o.preset, "Named preset: toy-gaussian, mlp-nt");
    sub->add_option("--seed", o.seed, "Base random seed");
    sub->add_option("--workers", o.workers, "Chain-level worker threads (default: all processors)");
    sub->add_option("--out", o.out, "Output directory (default: $METASG_OUT_ROOT or ./runs)");
  };
  auto* train = app.add_subcommand("meta-train", "Meta-train the sampler networks");
  common(train);
  train->add_option("--epochs", o.epochs, "Override the number of training epochs");
  auto* sample = app.add_subcommand("sample", "Draw samples on the test task");
  common(sample);
  sample->add_option("--sampler", o.sampler, "nnsghmc, sghmc, sgld or psgld");
  sample->add_option("--steps", o.steps, "Steps per chain");
  sample->add_option("--checkpoint", o.checkpoint, "Meta-network checkpoint (nnsghmc)");
  sample->add_option("--format", o.format, "csv or binary");
  auto* eval = app.add_subcommand("eval", "Evaluate a sample file");
  common(eval);
  eval->add_option("--samples", o.samples, "Sample file written by 'sample'");
  eval->add_option("--metric", o.metrics, "kl, ess or nll (repeatable)");
  auto* compare = app.add_subcommand("compare", "Run several samplers with matched budgets");
  common(compare);
  compare->add_option("--steps", o.steps, "Steps per chain");
  compare->add_option("--checkpoint", o.checkpoint, "Checkpoint for nnsghmc entries without one");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return cmd_meta_train(o);
    if (*sample) return cmd_sample(o);
    if (*eval) return cmd_eval(o);
    if (*compare) return cmd_compare(o);
  } catch (const DivergenceError& e) {
    std::cerr << "error: divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const TrainingError& e) {
    std::cerr << "error: training failed: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const CalibrationError& e) {
    std::cerr << "error: calibration failed: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric failure: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
