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

#include "checks.hpp"

#include <algorithm>
#include <cmath>

#include "metasg/error.hpp"
#include "metasg/rng.hpp"

namespace metasg::checks {

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

double sghmc_reduction_max_diff(std::size_t dim, std::size_t steps, std::uint64_t seed) {
  Rng setup(seed, 0);
  const auto d = static_cast<Eigen::Index>(dim);
  const Mat cov = random_covariance(dim, true, 0.5, 2.0, setup);
  const auto model = GaussianTarget::from_covariance(Vec::Constant(d, 1.0), cov, 1.0);

  MetaNets nets;
  nets.q_net = Mlp(2, 3);
  nets.d_net = Mlp(3, 3);
  nets.beta = 1.0;
  nets.alpha = 0.6;
  nets.c = 0.4;
  nets.diffusion_net_enabled = false;
  StepConfig step;
  step.eta = 0.05;
  step.gamma = GammaMode::kFiniteDifference;

  Vec theta0(d), p0(d);
  for (auto& v : theta0) v = setup.normal();
  for (auto& v : p0) v = setup.normal();

  // NNSGHMC moves theta before the gradient draw, SGHMC after it, so the
  // SGHMC chain starts one position update ahead.
  SamplerState nn = make_state(theta0, p0);
  Rng prime_rng(seed, 1);
  prime(nn, model, nets.stats.energy_scaling(), prime_rng);
  SamplerState sg = make_state(theta0 + step.eta * p0, p0);

  BaselineHyper hyper;
  hyper.eta = step.eta;
  hyper.friction = nets.alpha + nets.c;

  Rng rng_nn(seed, 2), rng_sg(seed, 2);
  double worst = 0.0;
  for (std::size_t t = 0; t < steps; ++t) {
    nnsghmc_advance(nn, model, nets, step, rng_nn);
    baseline_advance(BaselineKind::kSghmc, sg, model, hyper, rng_sg);
    // After the step: sg = (theta_{t+2}, p_{t+1}) and nn = (theta_{t+1}, p_{t+1}).
    worst = std::max(worst, (nn.momentum - sg.momentum).cwiseAbs().maxCoeff());
    const Vec nn_theta_next = nn.theta + step.eta * nn.momentum;
    worst = std::max(worst, (nn_theta_next - sg.theta).cwiseAbs().maxCoeff());
  }
  return worst;
}

MomentErrors sghmc_stationarity(double eta, std::size_t chains, std::size_t burn_in,
                                std::size_t steps, std::uint64_t seed, std::size_t workers) {
  Vec mean(2);
  mean << 1.0, -1.0;
  Mat cov(2, 2);
  cov << 0.5, 0.3, 0.3, 0.5;
  const auto model = GaussianTarget::from_covariance(mean, cov, 0.0);

  SamplerSpec spec;
  spec.kind = SamplerKind::kSghmc;
  spec.hyper.eta = eta;
  spec.hyper.friction = 1.0;

  Rng init(seed, 0);
  std::vector<SamplerState> states;
  for (std::size_t k = 0; k < chains; ++k) {
    Vec th = mean, p(2);
    for (auto& v : th) v += init.normal();
    for (auto& v : p) v = init.normal();
    states.push_back(make_state(th, p));
  }
  std::vector<Vec> sum(chains, Vec::Zero(2));
  std::vector<Mat> outer(chains, Mat::Zero(2, 2));
  run_chains(spec, model, states, burn_in + steps, seed, workers,
             [&](std::size_t k, const SamplerState& s) {
               if (s.step <= burn_in) return;
               sum[k] += s.theta;
               outer[k] += s.theta * s.theta.transpose();
             });
  Vec m = Vec::Zero(2);
  Mat o = Mat::Zero(2, 2);
  for (std::size_t k = 0; k < chains; ++k) {
    m += sum[k];
    o += outer[k];
  }
  const double n = static_cast<double>(chains * steps);
  m /= n;
  const Mat c = o / n - m * m.transpose();
  MomentErrors e;
  e.max_mean_abs = (m - mean).cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < 2; ++i)
    for (Eigen::Index j = 0; j < 2; ++j)
      e.max_cov_rel = std::max(e.max_cov_rel, std::abs(c(i, j) - cov(i, j)) / std::abs(cov(i, j)));
  return e;
}

SteinOracle stein_gaussian_oracle(std::size_t n, std::size_t dim, double multiplier,
                                  double ridge, std::uint64_t seed) {
  Rng rng(seed, 0);
  Mat x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = rng.normal();
  const Mat g = stein_score(x, multiplier, ridge);
  const Mat truth = -x;
  SteinOracle out;
  out.mse = (g - truth).rowwise().squaredNorm().mean();
  out.mean_sq_norm = truth.rowwise().squaredNorm().mean();
  return out;
}

ReplayOracle::ReplayOracle(const UnrollTape& tape, const EnergyModel& model,
                           const TrainConfig& cfg)
    : tape_(tape), model_(model), cfg_(cfg) {
  const auto d = static_cast<Eigen::Index>(model.dim());
  const auto kc = static_cast<Eigen::Index>(tape.chains);
  if (cfg.weight_cross > 0.0) {
    for (std::size_t t = cfg.cross_stride; t <= tape.steps; t += cfg.cross_stride) {
      Mat x(kc, d);
      for (Eigen::Index k = 0; k < kc; ++k) x.row(k) = tape.thetas[static_cast<std::size_t>(k)][t].transpose();
      cross_times_.push_back(t);
      cross_scores_.push_back(stein_score(x, cfg.bandwidth_multiplier, cfg.ridge));
    }
  }
  if (cfg.weight_in > 0.0) {
    // The oracle covers the configuration where every chain and every
    // post-start point enters the in-chain term.
    if (cfg.burn_in != 0 || cfg.thinning != 1 || cfg.in_chain_subsample < tape.chains) {
      throw ContractError("replay oracle needs burn_in 0, thinning 1 and all chains");
    }
    for (std::size_t k = 0; k < tape.chains; ++k) {
      Mat x(static_cast<Eigen::Index>(tape.steps), d);
      for (std::size_t t = 1; t <= tape.steps; ++t)
        x.row(static_cast<Eigen::Index>(t - 1)) = tape.thetas[k][t].transpose();
      in_scores_.push_back(stein_score(x, cfg.bandwidth_multiplier, cfg.ridge));
    }
  }
}

double ReplayOracle::loss(const MetaNets& nets_in) const {
  MetaNets nets = nets_in;
  nets.clamp_enabled = false;
  const double eta = tape_.eta;
  const std::size_t kc = tape_.chains;
  const std::size_t steps = tape_.steps;

  std::vector<std::vector<Vec>> thetas(kc);
  for (std::size_t k = 0; k < kc; ++k) {
    Vec theta = tape_.thetas[k][0];
    Vec p = tape_.records[k][0].momentum;
    thetas[k].push_back(theta);
    for (std::size_t t = 0; t < steps; ++t) {
      const StepRecord& r = tape_.records[k][t];
      for (Eigen::Index i = 0; i < theta.size(); ++i) {
        const double q1 = f_q(nets, r.u1, r.momentum[i]);
        const double q2 = f_q(nets, r.u2, r.momentum[i]);
        const double dd = nets.alpha * q2 * q2 + f_d(nets, r.u2, r.momentum[i], r.grad_next[i]) + nets.c;
        theta[i] += eta * (q1 * p[i] + r.gamma_theta[i]);
        p[i] = (1.0 - eta * dd) * p[i] - eta * (q2 * r.grad_next[i] - r.gamma_p[i]) +
               std::sqrt(2.0 * eta * dd) * r.xi[i];
      }
      thetas[k].push_back(theta);
    }
  }

  auto term = [&](const Vec& theta, const Mat& scores, Eigen::Index row) {
    return model_.energy(theta) + scores.row(row).dot(theta);
  };
  double cross = 0.0;
  for (std::size_t a = 0; a < cross_times_.size(); ++a)
    for (std::size_t k = 0; k < kc; ++k)
      cross += term(thetas[k][cross_times_[a]], cross_scores_[a], static_cast<Eigen::Index>(k));
  if (!cross_times_.empty()) cross /= static_cast<double>(cross_times_.size() * kc);

  double in = 0.0;
  for (std::size_t k = 0; k < in_scores_.size(); ++k)
    for (std::size_t t = 1; t <= steps; ++t)
      in += term(thetas[k][t], in_scores_[k], static_cast<Eigen::Index>(t - 1));
  if (!in_scores_.empty()) in /= static_cast<double>(in_scores_.size() * steps);

  return cfg_.weight_cross * cross + cfg_.weight_in * in;
}

GradCheck bptt_fd_check(const MetaNets& nets, const EnergyModel& model, const TrainConfig& cfg,
                        std::uint64_t seed, double h) {
  Rng init(seed, 0);
  std::vector<SamplerState> states;
  std::vector<Rng> rngs;
  for (std::size_t k = 0; k < cfg.chains; ++k) {
    states.push_back(initial_state(model, cfg, init));
    rngs.emplace_back(seed, 100 + k);
  }
  Rng loss_rng(seed, 1);
  const UnrollResult r = unroll_and_grad(nets, model, cfg, states, rngs, loss_rng);
  const ReplayOracle oracle(r.tape, model, cfg);

  GradCheck out;
  out.loss = r.loss;
  out.analytic = r.grad;
  out.numeric = Vec::Zero(r.grad.size());
  const Vec phi = nets.flat_params();
  for (Eigen::Index i = 0; i < phi.size(); ++i) {
    MetaNets a = nets, b = nets;
    Vec pa = phi, pb = phi;
    pa[i] += h;
    pb[i] -= h;
    a.set_flat_params(pa);
    b.set_flat_params(pb);
    out.numeric[i] = (oracle.loss(a) - oracle.loss(b)) / (2.0 * h);
  }
  const double floor = 1e-6 * std::max(out.analytic.cwiseAbs().maxCoeff(), 1e-12);
  for (Eigen::Index i = 0; i < phi.size(); ++i)
    out.max_rel_err = std::max(out.max_rel_err, relative_error(out.analytic[i], out.numeric[i], floor));
  return out;
}

}  // namespace metasg::checks
