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

#ifndef METASG_EXPERIMENT_HPP
#define METASG_EXPERIMENT_HPP

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "metasg/diagnostics.hpp"
#include "metasg/dynamics.hpp"
#include "metasg/energy.hpp"
#include "metasg/meta_nets.hpp"
#include "metasg/meta_training.hpp"

namespace metasg {

struct GaussianTaskSpec {
  std::size_t dim = 10;
  double mean = 3.0;
  bool correlated = false;
  double eig_lo = 0.2;
  double eig_hi = 2.0;
  double noise_std = 1.0;
  std::uint64_t cov_seed = 11;
};

struct BnnTaskSpec {
  std::string dataset = "data/digits.csv";
  double test_fraction = 0.2;
  std::uint64_t split_seed = 0;
  std::vector<std::size_t> hidden{20};
  std::string activation = "relu";
  double prior_precision = 1.0;
  std::size_t batch_size = 100;
  bool standardize = true;
};

struct TaskSpec {
  std::string kind = "gaussian";  // gaussian | bnn
  GaussianTaskSpec gaussian{};
  BnnTaskSpec bnn{};
  /// Initial positions for Gaussian tasks: Uniform[init_lo, init_hi]^D.
  double init_lo = 0.0;
  double init_hi = 6.0;
};

struct SamplerConfig {
  std::string kind = "sghmc";
  std::string label;  // defaults to kind
  double eta = 0.01;
  /// When positive, eta = sqrt(per_batch_lr / N) for the momentum samplers
  /// and per_batch_lr / N for sgld and psgld.
  double per_batch_lr = 0.0;
  /// When positive, the sghmc friction and the nnsghmc alpha become
  /// momentum_decay / eta.
  double momentum_decay = 0.0;
  std::string gamma = "finite-difference";
  bool noise = true;
  double fd_floor = 1e-8;
  double friction = 1.0;
  double rho = 0.99;
  double kappa = 1e-5;
  std::string checkpoint;
  bool clamp = true;
  double clamp_lo = -5.0;
  double clamp_hi = 5.0;
  bool recalibrate = true;
  std::size_t pilot_steps = 100;

  std::string name() const { return label.empty() ? kind : label; }
};

struct EvalSpec {
  std::size_t chains = 50;
  std::size_t steps = 12000;
  std::size_t burn_in = 2000;
  std::size_t thin = 10;
  std::size_t curve_every = 100;
  std::vector<std::string> metrics{"kl", "ess"};
  std::size_t seeds = 5;
  std::string format = "csv";  // csv | binary
};

struct RunConfig {
  std::string preset;
  TaskSpec train_task{};
  TaskSpec test_task{};
  NetsOptions nets{};
  TrainConfig train{};
  /// Step size, Gamma mode and alpha rule used while meta-training (kind is
  /// ignored).
  SamplerConfig train_sampler{};
  SamplerConfig sampler{};
  std::vector<SamplerConfig> compare{};
  EvalSpec eval{};
  std::uint64_t seed = 0;
  std::size_t workers = 0;  // 0 = all available processors
  std::string out;

  std::size_t resolved_workers() const;
};

/// Names accepted by --preset.
std::vector<std::string> preset_names();
/// Fully populated configuration for a named preset ("" = library defaults).
RunConfig preset_config(const std::string& name);

nlohmann::json to_json(const RunConfig& cfg);
/// Overlays `doc` on the preset it names (or on `base_preset`) and parses the
/// result. Unknown keys and ill-typed values raise ConfigError.
RunConfig run_config_from_json(const nlohmann::json& doc, const std::string& base_preset = "");
RunConfig load_run_config(const std::string& path, const std::string& base_preset = "");

/// Hex FNV-1a digest of the canonical JSON form, ignoring `out` and `workers`.
std::string config_hash(const RunConfig& cfg);

/// A target instantiated from a TaskSpec.
struct Task {
  TaskSpec spec;
  std::shared_ptr<EnergyModel> model;
  // Gaussian ground truth.
  bool has_truth = false;
  Vec mean;
  Mat cov;
  // Classifier data.
  std::shared_ptr<const BnnTarget> bnn;
  std::shared_ptr<const Dataset> test_data;
};

Task build_task(const TaskSpec& spec);

/// TrainConfig with the task's initial distribution applied.
TrainConfig train_config_for(const RunConfig& cfg, const Task& task);

/// Meta-trains on cfg.train_task.
TrainResult run_meta_train(const RunConfig& cfg, const TrainCallback& on_update = {});

/// Sampler ready to run on `task`: resolved step size, baseline
/// hyperparameters or networks with test-time statistics.
SamplerSpec resolve_sampler(const SamplerConfig& sc, const Task& task, std::uint64_t seed,
                            std::size_t workers, const MetaNets* nets = nullptr);

struct CurvePoint {
  std::size_t step = 0;
  std::string metric;
  double value = 0.0;
};

struct RunResult {
  SampleSet samples;
  std::vector<CurvePoint> curve;
  std::map<std::string, double> final_metrics;
};

/// Runs eval.chains chains for eval.steps steps. Chain starts depend only on
/// the seed, so different samplers with equal seeds start from equal states.
/// Curves: "kl" uses all draws of all chains up to the step; "test_error" and
/// "test_nll" (per-row mean) use the predictive averaged over thinned
/// post-burn-in draws. Final "ess" is the per-chain minimum-coordinate ESS
/// after burn-in averaged over chains.
RunResult run_sampler(const Task& task, const SamplerSpec& spec, const EvalSpec& eval,
                      std::uint64_t seed, std::size_t workers);

}  // namespace metasg

#endif  // METASG_EXPERIMENT_HPP
