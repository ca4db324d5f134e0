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

#ifndef METASG_DYNAMICS_HPP
#define METASG_DYNAMICS_HPP

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "metasg/energy.hpp"
#include "metasg/meta_nets.hpp"
#include "metasg/rng.hpp"

namespace metasg {

enum class GammaMode { kExact, kFiniteDifference, kOff };
GammaMode parse_gamma_mode(const std::string& name);
std::string to_string(GammaMode mode);

struct StepConfig {
  double eta = 0.01;
  GammaMode gamma = GammaMode::kExact;
  bool noise_on = true;
  /// Secant denominators smaller than this fall back to the exact partial.
  double fd_floor = 1e-8;
};

/// Augmented state z = (theta, p) of one chain plus the cached quantities the
/// next step needs.
struct SamplerState {
  Vec theta;
  Vec momentum;
  std::size_t step = 0;

  /// Stochastic energy at theta; filled by prime() or by the previous step.
  bool has_eval = false;
  EnergyEval eval;

  /// Finite-difference history: p_{t-1} and f_Q(U_bar(theta_t), p_{t-1}).
  bool has_history = false;
  Vec prev_momentum;
  Vec prev_q;

  /// Second-moment estimate (psgld only).
  Vec second_moment;
};

SamplerState make_state(Vec theta, Vec momentum);

/// Evaluates the stochastic energy at state.theta if not cached yet.
void prime(SamplerState& state, const EnergyModel& model, const EnergyScaling& scaling,
           Rng& rng);

/// Diagonals of Q_f and D_f:
///   Q_f,i = f_Q(U_bar, p_i),  D_f,i = alpha * Q_f,i^2 + f_D(U_bar, p_i, g_i) + c.
struct Preconditioners {
  Vec q;
  Vec d;
};
Preconditioners build_preconditioners(const SamplerState& state, const MetaNets& nets,
                                      double u_scaled, const Vec& grad);

/// Assembles the full 2D x 2D curl and diffusion matrices from the diagonals
/// (small dimensions only; used to check skew-symmetry and PSD-ness).
Mat assemble_curl(const Vec& q);
Mat assemble_diffusion(const Vec& d);

/// Gamma_theta at the stage-1 point (U_bar(theta_t), p_t):
///   exact:  -df_Q/dp_i
///   finite difference:  -(f_Q(U_t, p_t) - f_Q(U_t, p_{t-1})) / (p_t - p_{t-1})
/// `q_now` must carry partials whenever the exact value may be needed
/// (exact mode, missing history, or a denominator below fd_floor).
/// `dq_dp_out`, if given, receives the df_Q/dp estimate that was used.
Vec gamma_theta(GammaMode mode, const QEval& q_now, const Vec& p_now, const Vec* p_prev,
                const Vec* q_prev, double fd_floor, Vec* dq_dp_out = nullptr);

/// Inputs for Gamma_p at the stage-2 point (U_bar(theta_{t+1}), p_t, g_{t+1}).
struct GammaPInputs {
  const QEval* q_new = nullptr;     // f_Q(U_{t+1}, p_t), with partials if exact values may be needed
  const DEval* d_new = nullptr;     // f_D(U_{t+1}, p_t, g_{t+1})
  const Vec* scaled_grad = nullptr; // dU_bar/dtheta at theta_{t+1}
  double alpha = 0.0;
  // Finite-difference extras.
  const Vec* q_old_u = nullptr;     // f_Q(U_t, p_t)
  double u_new = 0.0;
  double u_old = 0.0;
  const Vec* dq_dp = nullptr;       // delayed df_Q/dp estimate from gamma_theta
  const Vec* d_old_p = nullptr;     // f_D(U_{t+1}, p_{t-1}, g_{t+1})
  const Vec* p_now = nullptr;
  const Vec* p_prev = nullptr;
};

/// Gamma_p,i = (df_Q/dU) dU/dtheta_i + df_D/dp_i + 2 alpha f_Q,i df_Q/dp_i,
/// exactly or by secants over the cached previous-step outputs.
Vec gamma_p(GammaMode mode, const GammaPInputs& in, double fd_floor);

/// Quantities of one NNSGHMC transition needed for reverse accumulation.
struct StepRecord {
  Vec theta;      // theta_t
  Vec momentum;   // p_t
  double u1 = 0;  // U_bar(theta_t), input of the theta-update network call
  double u2 = 0;  // U_bar(theta_{t+1}), input of the momentum-update calls
  Vec grad_next;  // stochastic gradient at theta_{t+1}
  Vec q1;         // f_Q(u1, p_t)
  Vec q2;         // f_Q(u2, p_t)
  Vec fd;         // f_D(u2, p_t, grad_next)
  Vec diffusion;  // D_f
  Vec xi;         // unit normal draws of the injected noise
  Vec gamma_theta;
  Vec gamma_p;
};

/// One two-stage update
///   theta_{t+1} = theta_t + eta * (Q_f(z_t) p_t + Gamma_theta)
///   p_{t+1}     = (1 - eta D_f) p_t - eta * (Q_f g_{t+1} - Gamma_p) + sqrt(2 eta D_f) xi
/// with Q_f/D_f for the momentum update re-evaluated at U(theta_{t+1}) and
/// g_{t+1} the stochastic gradient at theta_{t+1}.
void nnsghmc_advance(SamplerState& state, const EnergyModel& model, const MetaNets& nets,
                     const StepConfig& cfg, Rng& rng, StepRecord* record = nullptr);
SamplerState nnsghmc_step(SamplerState state, const EnergyModel& model, const MetaNets& nets,
                          const StepConfig& cfg, Rng& rng);

enum class BaselineKind { kSgld, kSghmc, kPsgld };

struct BaselineHyper {
  double eta = 0.01;
  double friction = 1.0;  // sghmc
  double rho = 0.99;      // psgld second-moment decay
  double kappa = 1e-5;    // psgld regulariser
  bool noise_on = true;
};

void baseline_advance(BaselineKind kind, SamplerState& state, const EnergyModel& model,
                      const BaselineHyper& hyper, Rng& rng);
SamplerState baseline_step(BaselineKind kind, SamplerState state, const EnergyModel& model,
                           const BaselineHyper& hyper, Rng& rng);

// ---------------------------------------------------------------------------
// Samplers as a value type, and multi-chain simulation.

enum class SamplerKind { kNnsghmc, kSghmc, kSgld, kPsgld };
SamplerKind parse_sampler_kind(const std::string& name);
std::string to_string(SamplerKind kind);

struct SamplerSpec {
  SamplerKind kind = SamplerKind::kSghmc;
  StepConfig step{};
  BaselineHyper hyper{};
  std::shared_ptr<const MetaNets> nets;  // nnsghmc only
};

void advance(const SamplerSpec& spec, SamplerState& state, const EnergyModel& model, Rng& rng);

/// Called after every step with (chain, state); invoked concurrently for
/// different chains, never for the same chain.
using ChainObserver = std::function<void(std::size_t, const SamplerState&)>;

/// Runs `states.size()` independent chains for `steps` steps. Chain k uses
/// the stream Rng(seed, k), so results do not depend on `workers`.
void run_chains(const SamplerSpec& spec, const EnergyModel& model,
                std::vector<SamplerState>& states, std::size_t steps, std::uint64_t seed,
                std::size_t workers, const ChainObserver& observer = {});

/// Root-mean-square of the values; the preprocessing scale statistic.
double rms_scale(std::span<const double> values);

/// Runs the NNSGHMC sampler with `nets` (randomly initialised in practice)
/// for `pilot_steps` steps from `initial_thetas` and returns statistics that
/// bring the momentum and gradient inputs to unit scale. `base` supplies
/// N, M, D_train and D_test.
PreprocessStats calibrate_preprocess(const EnergyModel& model, const MetaNets& nets,
                                     std::span<const Vec> initial_thetas,
                                     std::size_t pilot_steps, const StepConfig& cfg,
                                     const PreprocessStats& base, Rng& rng);

}  // namespace metasg

#endif  // METASG_DYNAMICS_HPP
