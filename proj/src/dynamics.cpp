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

#include "metasg/dynamics.hpp"

#include <cmath>

#include "metasg/error.hpp"
#include "metasg/parallel.hpp"

namespace metasg {

GammaMode parse_gamma_mode(const std::string& name) {
  if (name == "exact") return GammaMode::kExact;
  if (name == "finite-difference" || name == "fd") return GammaMode::kFiniteDifference;
  if (name == "off") return GammaMode::kOff;
  throw ConfigError("unknown gamma mode '" + name + "'");
}

std::string to_string(GammaMode mode) {
  switch (mode) {
    case GammaMode::kExact: return "exact";
    case GammaMode::kFiniteDifference: return "finite-difference";
    case GammaMode::kOff: return "off";
  }
  return "?";
}

SamplerState make_state(Vec theta, Vec momentum) {
  if (theta.size() != momentum.size()) throw ContractError("theta and momentum lengths differ");
  SamplerState s;
  s.theta = std::move(theta);
  s.momentum = std::move(momentum);
  return s;
}

void prime(SamplerState& state, const EnergyModel& model, const EnergyScaling& scaling,
           Rng& rng) {
  if (state.has_eval) return;
  state.eval = stochastic_energy_grad(model, state.theta, state.step, rng, scaling);
  state.has_eval = true;
}

Preconditioners build_preconditioners(const SamplerState& state, const MetaNets& nets,
                                      double u_scaled, const Vec& grad) {
  QEval q;
  DEval d;
  eval_q(nets, u_scaled, state.momentum, false, q);
  eval_d(nets, u_scaled, state.momentum, grad, false, d);
  Preconditioners out;
  out.d = (nets.alpha * q.value.array().square() + d.value.array() + nets.c).matrix();
  out.q = std::move(q.value);
  return out;
}

Mat assemble_curl(const Vec& q) {
  const auto n = q.size();
  Mat m = Mat::Zero(2 * n, 2 * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    m(i, n + i) = -q[i];
    m(n + i, i) = q[i];
  }
  return m;
}

Mat assemble_diffusion(const Vec& d) {
  const auto n = d.size();
  Mat m = Mat::Zero(2 * n, 2 * n);
  for (Eigen::Index i = 0; i < n; ++i) m(n + i, n + i) = d[i];
  return m;
}

Vec gamma_theta(GammaMode mode, const QEval& q_now, const Vec& p_now, const Vec* p_prev,
                const Vec* q_prev, double fd_floor, Vec* dq_dp_out) {
  const auto n = p_now.size();
  if (mode == GammaMode::kOff) {
    if (dq_dp_out) dq_dp_out->setZero(n);
    return Vec::Zero(n);
  }
  Vec dq_dp(n);
  if (mode == GammaMode::kExact || !p_prev || !q_prev) {
    dq_dp = q_now.d_dp;
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double dp = p_now[i] - (*p_prev)[i];
      dq_dp[i] = std::abs(dp) < fd_floor ? q_now.d_dp[i] : (q_now.value[i] - (*q_prev)[i]) / dp;
    }
  }
  Vec out = -dq_dp;
  if (dq_dp_out) *dq_dp_out = std::move(dq_dp);
  return out;
}

Vec gamma_p(GammaMode mode, const GammaPInputs& in, double fd_floor) {
  const QEval& q = *in.q_new;
  const DEval& d = *in.d_new;
  const Vec& grad = *in.scaled_grad;
  const auto n = q.value.size();
  if (mode == GammaMode::kOff) return Vec::Zero(n);

  const bool fd = mode == GammaMode::kFiniteDifference && in.q_old_u && in.dq_dp &&
                  in.d_old_p && in.p_now && in.p_prev;
  if (!fd) {
    return (q.d_du.array() * grad.array() + d.d_dp.array() +
            2.0 * in.alpha * q.value.array() * q.d_dp.array())
        .matrix();
  }
  Vec out(n);
  const double du = in.u_new - in.u_old;
  const bool du_ok = std::abs(du) >= fd_floor;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double dq_du = du_ok ? (q.value[i] - (*in.q_old_u)[i]) / du : q.d_du[i];
    const double dp = (*in.p_now)[i] - (*in.p_prev)[i];
    const double dd_dp = std::abs(dp) >= fd_floor ? (d.value[i] - (*in.d_old_p)[i]) / dp
                                                   : d.d_dp[i];
    out[i] = dq_du * grad[i] + dd_dp + 2.0 * in.alpha * q.value[i] * (*in.dq_dp)[i];
  }
  return out;
}

namespace {

void check_finite(const SamplerState& s, const char* who) {
  if (!s.theta.allFinite() || !s.momentum.allFinite()) {
    throw DivergenceError(std::string(who) + " produced a non-finite state", s.step);
  }
}

// True when any secant denominator falls under the floor, in which case the
// exact partials are needed as fallback.
bool needs_fallback(const Vec& a, const Vec& b, double floor) {
  return ((a - b).array().abs() < floor).any();
}

}  // namespace

void nnsghmc_advance(SamplerState& state, const EnergyModel& model, const MetaNets& nets,
                     const StepConfig& cfg, Rng& rng, StepRecord* record) {
  if (!(cfg.eta > 0.0)) throw ContractError("step size must be positive");
  if (!(cfg.fd_floor > 0.0)) throw ContractError("fd_floor must be positive");
  const EnergyScaling scaling = nets.stats.energy_scaling();
  prime(state, model, scaling, rng);

  const double eta = cfg.eta;
  const auto n = state.theta.size();
  const bool fd_mode = cfg.gamma == GammaMode::kFiniteDifference && state.has_history;
  const bool fd_fallback_p =
      fd_mode && needs_fallback(state.momentum, state.prev_momentum, cfg.fd_floor);

  // Stage 1: theta update with the outputs at z_t.
  const double u1 = state.eval.scaled_energy;
  QEval q1;
  const bool q1_partials =
      cfg.gamma == GammaMode::kExact ||
      (cfg.gamma == GammaMode::kFiniteDifference && (!state.has_history || fd_fallback_p));
  eval_q(nets, u1, state.momentum, q1_partials, q1);
  Vec dq_dp;
  Vec g_theta = gamma_theta(cfg.gamma, q1, state.momentum,
                            fd_mode ? &state.prev_momentum : nullptr,
                            fd_mode ? &state.prev_q : nullptr, cfg.fd_floor, &dq_dp);

  Vec theta_next = state.theta + eta * (q1.value.cwiseProduct(state.momentum) + g_theta);
  EnergyEval next = stochastic_energy_grad(model, theta_next, state.step + 1, rng, scaling);

  // Stage 2: momentum update with outputs refreshed at U(theta_{t+1}).
  const double u2 = next.scaled_energy;
  const bool u_fallback = fd_mode && std::abs(u2 - u1) < cfg.fd_floor;
  const bool stage2_partials =
      cfg.gamma == GammaMode::kExact ||
      (cfg.gamma == GammaMode::kFiniteDifference && (!state.has_history || fd_fallback_p ||
                                                     u_fallback));
  QEval q2;
  DEval d2;
  eval_q(nets, u2, state.momentum, stage2_partials, q2);
  eval_d(nets, u2, state.momentum, next.grad, stage2_partials, d2);
  const Vec diffusion =
      (nets.alpha * q2.value.array().square() + d2.value.array() + nets.c).matrix();

  GammaPInputs gp;
  gp.q_new = &q2;
  gp.d_new = &d2;
  gp.scaled_grad = &next.scaled_grad;
  gp.alpha = nets.alpha;
  DEval d_old_p;
  if (fd_mode) {
    eval_d(nets, u2, state.prev_momentum, next.grad, false, d_old_p);
    gp.q_old_u = &q1.value;
    gp.u_new = u2;
    gp.u_old = u1;
    gp.dq_dp = &dq_dp;
    gp.d_old_p = &d_old_p.value;
    gp.p_now = &state.momentum;
    gp.p_prev = &state.prev_momentum;
  }
  Vec g_p = gamma_p(cfg.gamma, gp, cfg.fd_floor);

  Vec xi = Vec::Zero(n);
  if (cfg.noise_on)
    for (Eigen::Index i = 0; i < n; ++i) xi[i] = rng.normal();

  Vec p_next(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double dfi = diffusion[i];
    p_next[i] = (1.0 - eta * dfi) * state.momentum[i] -
                eta * (q2.value[i] * next.grad[i] - g_p[i]) + std::sqrt(2.0 * eta * dfi) * xi[i];
  }

  if (record) {
    record->theta = state.theta;
    record->momentum = state.momentum;
    record->u1 = u1;
    record->u2 = u2;
    record->grad_next = next.grad;
    record->q1 = q1.value;
    record->q2 = q2.value;
    record->fd = d2.value;
    record->diffusion = diffusion;
    record->xi = xi;
    record->gamma_theta = g_theta;
    record->gamma_p = g_p;
  }

  state.prev_momentum = std::move(state.momentum);
  state.prev_q = std::move(q2.value);
  state.has_history = true;
  state.theta = std::move(theta_next);
  state.momentum = std::move(p_next);
  state.eval = std::move(next);
  state.has_eval = true;
  ++state.step;
  check_finite(state, "nnsghmc");
}

SamplerState nnsghmc_step(SamplerState state, const EnergyModel& model, const MetaNets& nets,
                          const StepConfig& cfg, Rng& rng) {
  nnsghmc_advance(state, model, nets, cfg, rng);
  return state;
}

void baseline_advance(BaselineKind kind, SamplerState& state, const EnergyModel& model,
                      const BaselineHyper& hyper, Rng& rng) {
  if (!(hyper.eta > 0.0)) throw ContractError("step size must be positive");
  const double eta = hyper.eta;
  const EnergyEval e = stochastic_energy_grad(model, state.theta, state.step, rng);
  const auto n = state.theta.size();
  auto noise = [&](double var) { return hyper.noise_on ? std::sqrt(var) * rng.normal() : 0.0; };

  switch (kind) {
    case BaselineKind::kSgld:
      for (Eigen::Index i = 0; i < n; ++i) {
        state.theta[i] += -eta * e.grad[i] + noise(2.0 * eta);
      }
      break;
    case BaselineKind::kSghmc: {
      if (!(hyper.friction > 0.0)) throw ContractError("sghmc friction must be positive");
      const double c = hyper.friction;
      for (Eigen::Index i = 0; i < n; ++i) {
        state.momentum[i] = (1.0 - eta * c) * state.momentum[i] - eta * (e.grad[i]) +
                            (hyper.noise_on ? std::sqrt(2.0 * eta * c) * rng.normal() : 0.0);
      }
      state.theta += eta * state.momentum;
      break;
    }
    case BaselineKind::kPsgld: {
      if (state.second_moment.size() != n) state.second_moment = Vec::Zero(n);
      const double inv_n = 1.0 / static_cast<double>(model.num_observations());
      for (Eigen::Index i = 0; i < n; ++i) {
        const double gi = e.grad[i] * inv_n;
        double& v = state.second_moment[i];
        v = hyper.rho * v + (1.0 - hyper.rho) * gi * gi;
        const double precond = 1.0 / (std::sqrt(v) + hyper.kappa);
        state.theta[i] += -0.5 * eta * precond * e.grad[i] + noise(eta * precond);
      }
      break;
    }
  }
  state.eval = e;
  state.has_eval = false;  // cached eval refers to the pre-step theta
  ++state.step;
  check_finite(state, "baseline sampler");
}

SamplerState baseline_step(BaselineKind kind, SamplerState state, const EnergyModel& model,
                           const BaselineHyper& hyper, Rng& rng) {
  baseline_advance(kind, state, model, hyper, rng);
  return state;
}

// ---------------------------------------------------------------------------

SamplerKind parse_sampler_kind(const std::string& name) {
  if (name == "nnsghmc") return SamplerKind::kNnsghmc;
  if (name == "sghmc") return SamplerKind::kSghmc;
  if (name == "sgld") return SamplerKind::kSgld;
  if (name == "psgld") return SamplerKind::kPsgld;
  throw ConfigError("unknown sampler kind '" + name + "'");
}

std::string to_string(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::kNnsghmc: return "nnsghmc";
    case SamplerKind::kSghmc: return "sghmc";
    case SamplerKind::kSgld: return "sgld";
    case SamplerKind::kPsgld: return "psgld";
  }
  return "?";
}

void advance(const SamplerSpec& spec, SamplerState& state, const EnergyModel& model, Rng& rng) {
  switch (spec.kind) {
    case SamplerKind::kNnsghmc:
      if (!spec.nets) throw ConfigError("nnsghmc sampler needs meta networks");
      nnsghmc_advance(state, model, *spec.nets, spec.step, rng);
      break;
    case SamplerKind::kSghmc: baseline_advance(BaselineKind::kSghmc, state, model, spec.hyper, rng); break;
    case SamplerKind::kSgld: baseline_advance(BaselineKind::kSgld, state, model, spec.hyper, rng); break;
    case SamplerKind::kPsgld: baseline_advance(BaselineKind::kPsgld, state, model, spec.hyper, rng); break;
  }
}

void run_chains(const SamplerSpec& spec, const EnergyModel& model,
                std::vector<SamplerState>& states, std::size_t steps, std::uint64_t seed,
                std::size_t workers, const ChainObserver& observer) {
  parallel_for(states.size(), workers, [&](std::size_t k) {
    Rng rng(seed, k);
    for (std::size_t t = 0; t < steps; ++t) {
      advance(spec, states[k], model, rng);
      if (observer) observer(k, states[k]);
    }
  });
}

double rms_scale(std::span<const double> values) {
  if (values.empty()) throw ContractError("rms_scale needs at least one value");
  double acc = 0.0;
  for (double v : values) acc += v * v;
  return std::sqrt(acc / static_cast<double>(values.size()));
}

PreprocessStats calibrate_preprocess(const EnergyModel& model, const MetaNets& nets,
                                     std::span<const Vec> initial_thetas,
                                     std::size_t pilot_steps, const StepConfig& cfg,
                                     const PreprocessStats& base, Rng& rng) {
  if (pilot_steps < 1) throw ContractError("calibration needs pilot_steps >= 1");
  if (initial_thetas.empty()) throw ContractError("calibration needs at least one chain");
  MetaNets pilot = nets;
  pilot.stats = base;
  pilot.stats.momentum_scale = 1.0;
  pilot.stats.gradient_scale = 1.0;

  std::vector<double> momenta, grads;
  momenta.reserve(pilot_steps * initial_thetas.size() * model.dim());
  grads.reserve(momenta.capacity());
  for (const Vec& theta0 : initial_thetas) {
    Vec p0(theta0.size());
    for (auto& v : p0) v = rng.normal();
    SamplerState s = make_state(theta0, std::move(p0));
    try {
      for (std::size_t t = 0; t < pilot_steps; ++t) {
        nnsghmc_advance(s, model, pilot, cfg, rng);
        momenta.insert(momenta.end(), s.momentum.begin(), s.momentum.end());
        grads.insert(grads.end(), s.eval.grad.begin(), s.eval.grad.end());
      }
    } catch (const DivergenceError& e) {
      throw CalibrationError(std::string("pilot run diverged: ") + e.what() +
                             "; try a smaller step size");
    }
  }
  PreprocessStats out = base;
  out.momentum_scale = rms_scale(momenta);
  out.gradient_scale = rms_scale(grads);
  if (!std::isfinite(out.momentum_scale) || !std::isfinite(out.gradient_scale) ||
      !(out.momentum_scale > 0.0) || !(out.gradient_scale > 0.0)) {
    throw CalibrationError("pilot run produced degenerate scales; try a smaller step size");
  }
  return out;
}

}  // namespace metasg
