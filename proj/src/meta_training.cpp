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

#include "metasg/meta_training.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

#include "metasg/error.hpp"
#include "metasg/parallel.hpp"

namespace metasg {

void TrainConfig::validate() const {
  if (chains < 2) throw ContractError("meta-training needs at least 2 chains");
  if (thinning < 1) throw ContractError("thinning stride must be >= 1");
  if (!(ridge > 0.0)) throw ContractError("Stein ridge must be positive");
  if (!(bandwidth_multiplier > 0.0)) throw ContractError("bandwidth multiplier must be positive");
  if (truncation < 1) throw ContractError("truncation length must be >= 1");
  if (cross_stride < 1) throw ContractError("cross-chain stride must be >= 1");
  if (unroll % cross_stride != 0)
    throw ContractError("cross-chain stride must divide the unroll length");
  if (!(learning_rate > 0.0)) throw ContractError("learning rate must be positive");
  if (weight_cross < 0.0 || weight_in < 0.0) throw ContractError("loss weights must be >= 0");
  if (!(init_hi >= init_lo)) throw ContractError("init range is empty");
  if (!(step.eta > 0.0)) throw ContractError("step size must be positive");
}

// ---------------------------------------------------------------------------
// Stein gradient estimator

double median_pairwise_distance(const Mat& samples) {
  const auto k = samples.rows();
  if (k < 2) return 0.0;
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(k * (k - 1) / 2));
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j) d.push_back((samples.row(i) - samples.row(j)).norm());
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double med = d[mid];
  if (d.size() % 2 == 0) {
    const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  return med;
}

Mat stein_score(const Mat& samples, double bandwidth_multiplier, double ridge) {
  if (!(ridge > 0.0)) throw ContractError("Stein ridge must be positive");
  if (!(bandwidth_multiplier > 0.0)) throw ContractError("bandwidth multiplier must be positive");
  if (!samples.allFinite()) throw ContractError("Stein samples must be finite");
  const auto k = samples.rows();
  const auto d = samples.cols();
  if (k < 2) return Mat::Zero(k, d);

  const double sigma = bandwidth_multiplier * median_pairwise_distance(samples);
  if (!(sigma > 0.0)) {
    throw NumericError(
        "Stein kernel system is singular: all samples coincide; raise the ridge or "
        "provide distinct samples");
  }
  const double inv_s2 = 1.0 / (sigma * sigma);
  Mat kern(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    kern(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < k; ++j) {
      const double v = std::exp(-0.5 * (samples.row(i) - samples.row(j)).squaredNorm() * inv_s2);
      kern(i, j) = v;
      kern(j, i) = v;
    }
  }
  // <grad, K>_{ij} = sum_l d/d x_{l,j} k(x_l, x_i) = sum_l (x_ij - x_lj) K_li / sigma^2
  Mat div(k, d);
  const Vec row_sums = kern.colwise().sum().transpose();
  div = (row_sums.asDiagonal() * samples - kern * samples) * inv_s2;

  kern.diagonal().array() += ridge;
  Eigen::LDLT<Mat> ldlt(kern);
  if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-12)) {
    throw NumericError("Stein kernel system is numerically singular; increase the ridge");
  }
  Mat g = -ldlt.solve(div);
  if (!g.allFinite()) throw NumericError("Stein solve produced non-finite scores; increase the ridge");
  return g;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

LossResult accumulate_loss(const std::vector<std::vector<Vec>>& groups,
                           const std::vector<std::vector<double>>& energies,
                           const std::vector<std::vector<Vec>>& grads,
                           const std::vector<Mat>& scores, double normalizer) {
  LossResult out;
  for (std::size_t a = 0; a < groups.size(); ++a) {
    for (std::size_t b = 0; b < groups[a].size(); ++b) {
      const Vec& theta = groups[a][b];
      const Vec g = scores[a].row(static_cast<Eigen::Index>(b)).transpose();
      out.loss += energies[a][b] + g.dot(theta);
      out.seeds.push_back((grads[a][b] + g) / normalizer);
    }
  }
  out.loss /= normalizer;
  return out;
}

void check_shapes(const std::vector<std::vector<Vec>>& groups,
                  const std::vector<std::vector<double>>& energies,
                  const std::vector<std::vector<Vec>>& grads, const std::vector<Mat>& scores) {
  if (energies.size() != groups.size() || grads.size() != groups.size() ||
      scores.size() != groups.size()) {
    throw ContractError("loss inputs have mismatched group counts");
  }
  for (std::size_t a = 0; a < groups.size(); ++a) {
    const auto n = groups[a].size();
    if (energies[a].size() != n || grads[a].size() != n ||
        static_cast<std::size_t>(scores[a].rows()) != n) {
      throw ContractError("loss inputs have mismatched sample counts");
    }
  }
}

}  // namespace

LossResult cross_chain_loss(const std::vector<std::vector<Vec>>& slices,
                            const std::vector<std::vector<double>>& energies,
                            const std::vector<std::vector<Vec>>& grads,
                            const std::vector<Mat>& scores) {
  check_shapes(slices, energies, grads, scores);
  if (slices.empty()) return {};
  const std::size_t k = slices.front().size();
  if (k < 2) throw ContractError("cross-chain loss needs at least 2 chains");
  for (const auto& s : slices)
    if (s.size() != k) throw ContractError("every time slice must hold one sample per chain");
  return accumulate_loss(slices, energies, grads, scores,
                         static_cast<double>(slices.size() * k));
}

LossResult in_chain_loss(const std::vector<std::vector<Vec>>& chains,
                         const std::vector<std::vector<double>>& energies,
                         const std::vector<std::vector<Vec>>& grads,
                         const std::vector<Mat>& scores) {
  check_shapes(chains, energies, grads, scores);
  if (chains.empty()) return {};
  const std::size_t s = chains.front().size();
  if (s < 2) throw ContractError("in-chain loss needs at least 2 retained time points per chain");
  for (const auto& c : chains)
    if (c.size() != s) throw ContractError("every chain must retain the same number of points");
  return accumulate_loss(chains, energies, grads, scores,
                         static_cast<double>(chains.size() * s));
}

// ---------------------------------------------------------------------------
// Unrolling and reverse accumulation

SamplerState initial_state(const EnergyModel& model, const TrainConfig& cfg, Rng& rng) {
  const auto d = static_cast<Eigen::Index>(model.dim());
  Vec theta(d);
  if (const auto* bnn = dynamic_cast<const BnnTarget*>(&model)) {
    theta = bnn->initial_theta(rng);
  } else {
    for (auto& v : theta) v = rng.uniform(cfg.init_lo, cfg.init_hi);
  }
  Vec p(d);
  for (auto& v : p) v = rng.normal();
  return make_state(std::move(theta), std::move(p));
}

Vec backprop_tape(const MetaNets& nets, const UnrollTape& tape) {
  Vec grad = Vec::Zero(static_cast<Eigen::Index>(nets.num_params()));
  const double eta = tape.eta;
  const double alpha = nets.alpha;
  const std::size_t trunc = std::max<std::size_t>(tape.truncation, 1);
  std::span<double> gspan(grad.data(), static_cast<std::size_t>(grad.size()));
  const Vec empty;

  for (std::size_t k = 0; k < tape.chains; ++k) {
    if (tape.steps == 0) break;
    const auto d = tape.thetas[k][0].size();
    Vec lt = Vec::Zero(d), lp = Vec::Zero(d);
    Vec la(d), lb(d), lf(d);
    for (std::size_t s = tape.steps; s-- > 0;) {
      if ((s + 1) % trunc == 0) {
        lt.setZero();
        lp.setZero();
      }
      lt += tape.seeds[k][s + 1];
      const StepRecord& r = tape.records[k][s];
      for (Eigen::Index i = 0; i < d; ++i) {
        const double dd = r.diffusion[i];
        double ld = -eta * r.momentum[i];
        if (r.xi[i] != 0.0) ld += eta * r.xi[i] / std::sqrt(2.0 * eta * dd);
        ld *= lp[i];
        lb[i] = -eta * r.grad_next[i] * lp[i] + ld * 2.0 * alpha * r.q2[i];
        lf[i] = ld;
        la[i] = lt[i] * eta * r.momentum[i];
      }
      accumulate_nets_param_grad(nets, r.u1, r.momentum, r.grad_next, la, empty, gspan);
      accumulate_nets_param_grad(nets, r.u2, r.momentum, r.grad_next, lb, lf, gspan);
      for (Eigen::Index i = 0; i < d; ++i) {
        lp[i] = lp[i] * (1.0 - eta * r.diffusion[i]) + lt[i] * eta * r.q1[i];
      }
    }
  }
  return grad;
}

UnrollResult unroll_and_grad(const MetaNets& nets_in, const EnergyModel& model,
                             const TrainConfig& cfg, std::vector<SamplerState>& states,
                             std::vector<Rng>& chain_rngs, Rng& loss_rng) {
  cfg.validate();
  if (states.size() != chain_rngs.size()) throw ContractError("one RNG stream per chain required");
  if (states.size() < 2) throw ContractError("meta-training needs at least 2 chains");
  MetaNets nets = nets_in;
  nets.clamp_enabled = false;

  const std::size_t kc = states.size();
  const std::size_t steps = cfg.unroll;
  UnrollResult out;
  out.grad = Vec::Zero(static_cast<Eigen::Index>(nets.num_params()));
  UnrollTape& tape = out.tape;
  tape.chains = kc;
  tape.steps = steps;
  tape.truncation = cfg.truncation;
  tape.eta = cfg.step.eta;
  tape.records.assign(kc, {});
  tape.thetas.assign(kc, {});
  tape.energies.assign(kc, {});
  tape.grads.assign(kc, {});
  tape.ages.assign(kc, {});
  tape.seeds.assign(kc, {});
  if (steps == 0) return out;

  const EnergyScaling scaling = nets.stats.energy_scaling();
  parallel_for(kc, cfg.workers, [&](std::size_t k) {
    SamplerState& s = states[k];
    Rng& rng = chain_rngs[k];
    prime(s, model, scaling, rng);
    tape.records[k].resize(steps);
    tape.thetas[k].reserve(steps + 1);
    tape.energies[k].reserve(steps + 1);
    tape.grads[k].reserve(steps + 1);
    tape.ages[k].reserve(steps + 1);
    auto push = [&] {
      tape.thetas[k].push_back(s.theta);
      tape.energies[k].push_back(s.eval.energy);
      tape.grads[k].push_back(s.eval.grad);
      tape.ages[k].push_back(s.step);
    };
    push();
    for (std::size_t t = 0; t < steps; ++t) {
      nnsghmc_advance(s, model, nets, cfg.step, rng, &tape.records[k][t]);
      push();
    }
    tape.seeds[k].assign(steps + 1, Vec::Zero(s.theta.size()));
  });

  const auto dim = static_cast<Eigen::Index>(model.dim());

  if (cfg.weight_cross > 0.0) {
    std::vector<std::vector<Vec>> slices, grads;
    std::vector<std::vector<double>> energies;
    std::vector<Mat> scores;
    std::vector<std::size_t> times;
    for (std::size_t t = cfg.cross_stride; t <= steps; t += cfg.cross_stride) {
      Mat x(static_cast<Eigen::Index>(kc), dim);
      std::vector<Vec> sl, gr;
      std::vector<double> en;
      for (std::size_t k = 0; k < kc; ++k) {
        x.row(static_cast<Eigen::Index>(k)) = tape.thetas[k][t].transpose();
        sl.push_back(tape.thetas[k][t]);
        gr.push_back(tape.grads[k][t]);
        en.push_back(tape.energies[k][t]);
      }
      scores.push_back(stein_score(x, cfg.bandwidth_multiplier, cfg.ridge));
      slices.push_back(std::move(sl));
      grads.push_back(std::move(gr));
      energies.push_back(std::move(en));
      times.push_back(t);
    }
    LossResult lr = cross_chain_loss(slices, energies, grads, scores);
    out.cross_loss = lr.loss;
    std::size_t idx = 0;
    for (std::size_t a = 0; a < times.size(); ++a)
      for (std::size_t k = 0; k < kc; ++k) tape.seeds[k][times[a]] += cfg.weight_cross * lr.seeds[idx++];
  }

  if (cfg.weight_in > 0.0) {
    std::vector<std::size_t> order(kc);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), loss_rng.engine());
    const std::size_t ksub = std::min(std::max<std::size_t>(cfg.in_chain_subsample, 1), kc);
    order.resize(ksub);
    std::sort(order.begin(), order.end());

    std::vector<std::vector<Vec>> pools, grads;
    std::vector<std::vector<double>> energies;
    std::vector<std::vector<std::size_t>> times;
    for (std::size_t k : order) {
      std::vector<Vec> pool, gr;
      std::vector<double> en;
      std::vector<std::size_t> ts;
      for (std::size_t t = 1; t <= steps; ++t) {
        const std::size_t age = tape.ages[k][t];
        if (age > cfg.burn_in && age % cfg.thinning == 0) {
          pool.push_back(tape.thetas[k][t]);
          gr.push_back(tape.grads[k][t]);
          en.push_back(tape.energies[k][t]);
          ts.push_back(t);
        }
      }
      if (pool.size() < 2) {
        throw ContractError(
            "in-chain loss needs at least 2 retained points per chain after burn-in and "
            "thinning");
      }
      pools.push_back(std::move(pool));
      grads.push_back(std::move(gr));
      energies.push_back(std::move(en));
      times.push_back(std::move(ts));
    }
    // Chains retain equal counts once they share an age; trim to the minimum otherwise.
    std::size_t s_min = pools.front().size();
    for (const auto& p : pools) s_min = std::min(s_min, p.size());
    std::vector<Mat> scores;
    for (std::size_t a = 0; a < pools.size(); ++a) {
      pools[a].resize(s_min);
      grads[a].resize(s_min);
      energies[a].resize(s_min);
      times[a].resize(s_min);
      Mat x(static_cast<Eigen::Index>(s_min), dim);
      for (std::size_t b = 0; b < s_min; ++b) x.row(static_cast<Eigen::Index>(b)) = pools[a][b].transpose();
      scores.push_back(stein_score(x, cfg.bandwidth_multiplier, cfg.ridge));
    }
    LossResult lr = in_chain_loss(pools, energies, grads, scores);
    out.in_loss = lr.loss;
    std::size_t idx = 0;
    for (std::size_t a = 0; a < order.size(); ++a)
      for (std::size_t b = 0; b < s_min; ++b)
        tape.seeds[order[a]][times[a][b]] += cfg.weight_in * lr.seeds[idx++];
  }

  out.loss = cfg.weight_cross * out.cross_loss + cfg.weight_in * out.in_loss;
  out.grad = backprop_tape(nets, tape);
  if (!std::isfinite(out.loss)) throw TrainingError("non-finite meta-training loss", steps);
  if (!out.grad.allFinite()) throw TrainingError("non-finite meta-training gradient", steps);
  return out;
}

UnrollResult unroll_and_grad(const MetaNets& nets, const EnergyModel& model,
                             const TrainConfig& cfg, Rng& rng) {
  std::vector<SamplerState> states;
  std::vector<Rng> rngs;
  for (std::size_t k = 0; k < cfg.chains; ++k) states.push_back(initial_state(model, cfg, rng));
  for (std::size_t k = 0; k < cfg.chains; ++k) rngs.emplace_back(rng.next_u64(), k);
  Rng loss_rng(rng.next_u64(), 0);
  return unroll_and_grad(nets, model, cfg, states, rngs, loss_rng);
}

// ---------------------------------------------------------------------------

void adam_step(Vec& phi, const Vec& grad, AdamState& st, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (grad.size() != phi.size()) throw ContractError("Adam gradient length differs from phi");
  if (st.m.size() == 0) st.m = Vec::Zero(phi.size());
  if (st.v.size() == 0) st.v = Vec::Zero(phi.size());
  if (st.m.size() != phi.size() || st.v.size() != phi.size())
    throw ContractError("Adam moment length differs from phi");
  ++st.t;
  st.m = b1 * st.m + (1.0 - b1) * grad;
  st.v = b2 * st.v + (1.0 - b2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  phi.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + eps);
}

TrainResult meta_train(const EnergyModel& model, const TrainConfig& cfg,
                       const NetsOptions& net_options, std::uint64_t seed,
                       const TrainCallback& on_update) {
  cfg.validate();
  Rng init_rng(seed, 1);
  TrainResult result;
  result.nets = make_meta_nets(net_options, init_rng);
  MetaNets& nets = result.nets;
  nets.clamp_enabled = false;

  Rng state_rng(seed, 2);
  auto fresh_states = [&] {
    std::vector<SamplerState> s;
    s.reserve(cfg.chains);
    for (std::size_t k = 0; k < cfg.chains; ++k) s.push_back(initial_state(model, cfg, state_rng));
    return s;
  };

  PreprocessStats base;
  base.n_observations = static_cast<double>(model.num_observations());
  base.batch_size = static_cast<double>(model.batch_size());
  base.dim_train = static_cast<double>(model.dim());
  base.dim_test = static_cast<double>(model.dim());
  {
    std::vector<Vec> init;
    for (const auto& s : fresh_states()) init.push_back(s.theta);
    Rng cal_rng(seed, 3);
    nets.stats = calibrate_preprocess(model, nets, init, cfg.pilot_steps, cfg.step, base, cal_rng);
  }

  std::vector<Rng> chain_rngs;
  for (std::size_t k = 0; k < cfg.chains; ++k) chain_rngs.emplace_back(seed, 1000 + k);
  Rng loss_rng(seed, 4);
  AdamState adam;
  Vec phi = nets.flat_params();
  std::size_t update = 0;
  std::size_t consecutive = 0;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<SamplerState> states = fresh_states();
    for (std::size_t sub = 0; sub < cfg.sub_epochs; ++sub) {
      TrainLogEntry entry;
      entry.update = update;
      entry.epoch = epoch;
      try {
        UnrollResult r = unroll_and_grad(nets, model, cfg, states, chain_rngs, loss_rng);
        Vec g = std::move(r.grad);
        entry.grad_norm = g.norm();
        if (cfg.grad_clip > 0.0 && entry.grad_norm > cfg.grad_clip) g *= cfg.grad_clip / entry.grad_norm;
        adam_step(phi, g, adam, cfg.learning_rate);
        nets.set_flat_params(phi);
        entry.loss = r.loss;
        entry.cross_loss = r.cross_loss;
        entry.in_loss = r.in_loss;
        consecutive = 0;
      } catch (const DivergenceError& e) {
        entry.diverged = true;
      } catch (const TrainingError& e) {
        entry.diverged = true;
      }
      entry.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.log.push_back(entry);
      if (on_update) on_update(entry);
      ++update;
      if (entry.diverged) {
        if (++consecutive >= cfg.max_consecutive_divergences) {
          throw TrainingError("meta-training aborted after " + std::to_string(consecutive) +
                                  " consecutive divergent updates",
                              update);
        }
        states = fresh_states();
      }
    }
  }
  return result;
}

void write_train_log(const std::vector<TrainLogEntry>& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write training log '" + path + "'");
  out << "update,epoch,loss,cross_loss,in_loss,grad_norm,wall_seconds,diverged\n";
  out << std::setprecision(12);
  for (const auto& e : log) {
    out << e.update << ',' << e.epoch << ',' << e.loss << ',' << e.cross_loss << ','
        << e.in_loss << ',' << e.grad_norm << ',' << e.wall_seconds << ',' << (e.diverged ? 1 : 0)
        << '\n';
  }
}

}  // namespace metasg
