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

#ifndef METASG_META_TRAINING_HPP
#define METASG_META_TRAINING_HPP

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "metasg/dynamics.hpp"
#include "metasg/energy.hpp"
#include "metasg/meta_nets.hpp"
#include "metasg/rng.hpp"

namespace metasg {

struct TrainConfig {
  std::size_t chains = 50;
  /// Steps per unroll window; one optimizer update per window.
  std::size_t unroll = 100;
  /// State sensitivities are reset every `truncation` steps.
  std::size_t truncation = 20;
  std::size_t cross_stride = 2;
  std::size_t burn_in = 50;
  std::size_t in_chain_subsample = 5;
  std::size_t thinning = 3;
  double ridge = 1e-3;
  double bandwidth_multiplier = 0.5;
  double learning_rate = 5e-4;
  std::size_t epochs = 100;
  std::size_t sub_epochs = 4;
  double weight_cross = 1.0;
  double weight_in = 1.0;
  /// Chain positions are re-drawn from Uniform[init_lo, init_hi]^D at every
  /// epoch unless the model supplies its own initializer.
  double init_lo = 0.0;
  double init_hi = 6.0;
  std::size_t pilot_steps = 100;
  std::size_t max_consecutive_divergences = 3;
  double grad_clip = 0.0;  // max gradient norm; 0 disables clipping
  StepConfig step{};
  std::size_t workers = 1;

  void validate() const;
};

/// Stein estimate of grad log q at each row of `samples` (K x D):
///   G = -(K + ridge I)^{-1} <grad, K>
/// with an RBF kernel of width bandwidth_multiplier * median pairwise distance.
Mat stein_score(const Mat& samples, double bandwidth_multiplier, double ridge);

/// Median pairwise Euclidean distance between rows (0 for fewer than 2 rows).
double median_pairwise_distance(const Mat& samples);

/// Per-sample loss contributions: energies U~, entropy surrogate <G, theta>,
/// and the adjoint seed (grad U~ + G) / normalizer.
struct LossResult {
  double loss = 0.0;
  std::vector<Vec> seeds;  // one per input sample, same order
};

/// Loss over retained time slices. slices[s] holds K samples (one per chain);
/// energies[s][k], grads[s][k] and scores[s] (K x D) refer to the same samples.
LossResult cross_chain_loss(const std::vector<std::vector<Vec>>& slices,
                            const std::vector<std::vector<double>>& energies,
                            const std::vector<std::vector<Vec>>& grads,
                            const std::vector<Mat>& scores);

/// Loss over thinned within-chain samples. chains[k][s] is the s-th retained
/// point of sub-sampled chain k; scores[k] (S x D) is estimated from that
/// chain's pooled points.
LossResult in_chain_loss(const std::vector<std::vector<Vec>>& chains,
                         const std::vector<std::vector<double>>& energies,
                         const std::vector<std::vector<Vec>>& grads,
                         const std::vector<Mat>& scores);

/// Everything recorded while unrolling K chains for T steps.
/// thetas/energies/grads are indexed [chain][t] for t = 0..T (state after t
/// steps); records[chain][t] describes the transition t -> t+1; seeds
/// [chain][t] are the loss adjoints with respect to theta after t steps.
struct UnrollTape {
  std::size_t chains = 0;
  std::size_t steps = 0;
  std::size_t truncation = 0;
  double eta = 0.0;
  std::vector<std::vector<StepRecord>> records;
  std::vector<std::vector<Vec>> thetas;
  std::vector<std::vector<double>> energies;
  std::vector<std::vector<Vec>> grads;
  std::vector<std::vector<std::size_t>> ages;
  std::vector<std::vector<Vec>> seeds;
};

struct UnrollResult {
  double loss = 0.0;
  double cross_loss = 0.0;
  double in_loss = 0.0;
  Vec grad;
  UnrollTape tape;
};

/// Simulates the chains for cfg.unroll steps from `states` (advanced in
/// place), evaluates the weighted losses and reverse-accumulates d loss/d phi
/// with network inputs, Gamma and energy gradients held constant. Chain k
/// draws from chain_rngs[k]; `loss_rng` picks the in-chain sub-sample.
UnrollResult unroll_and_grad(const MetaNets& nets, const EnergyModel& model,
                             const TrainConfig& cfg, std::vector<SamplerState>& states,
                             std::vector<Rng>& chain_rngs, Rng& loss_rng);

/// Convenience form: fresh chains from the configured initial distribution
/// with standard normal momenta, all streams derived from `rng`.
UnrollResult unroll_and_grad(const MetaNets& nets, const EnergyModel& model,
                             const TrainConfig& cfg, Rng& rng);

/// Reverse pass over a tape with seeds filled in. Returns d/dphi of
/// sum_{k,t} <seeds[k][t], theta_k^t> through the stop-gradient update map.
Vec backprop_tape(const MetaNets& nets, const UnrollTape& tape);

struct AdamState {
  Vec m;
  Vec v;
  std::size_t t = 0;
};

/// One bias-corrected Adam update (beta1 0.9, beta2 0.999, eps 1e-8).
void adam_step(Vec& phi, const Vec& grad, AdamState& state, double lr);

struct TrainLogEntry {
  std::size_t update = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double cross_loss = 0.0;
  double in_loss = 0.0;
  double grad_norm = 0.0;
  double wall_seconds = 0.0;
  bool diverged = false;
};

struct TrainResult {
  MetaNets nets;
  std::vector<TrainLogEntry> log;
};

/// Draws initial chain states: theta from Uniform[lo, hi]^D (or the
/// classifier initializer), momentum standard normal.
SamplerState initial_state(const EnergyModel& model, const TrainConfig& cfg, Rng& rng);

using TrainCallback = std::function<void(const TrainLogEntry&)>;

/// Calibrates the input statistics with the initial networks, then runs
/// epochs x sub_epochs unroll windows with one Adam update each. Chains are
/// re-initialized at every epoch boundary and after a divergence.
TrainResult meta_train(const EnergyModel& model, const TrainConfig& cfg,
                       const NetsOptions& net_options, std::uint64_t seed,
                       const TrainCallback& on_update = {});

void write_train_log(const std::vector<TrainLogEntry>& log, const std::string& path);

}  // namespace metasg

#endif  // METASG_META_TRAINING_HPP
