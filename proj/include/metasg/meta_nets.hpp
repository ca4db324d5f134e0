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

#ifndef METASG_META_NETS_HPP
#define METASG_META_NETS_HPP

#include <Eigen/Core>
#include <array>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "metasg/energy.hpp"
#include "metasg/rng.hpp"

namespace metasg {

/// One-hidden-layer perceptron with tanh hidden units and a scalar linear
/// output. Parameters are stored flat: W1 (hidden x inputs, row-major), b1,
/// w2, b2.
class Mlp {
 public:
  static constexpr std::size_t kMaxInputs = 3;

  Mlp() = default;
  Mlp(std::size_t inputs, std::size_t hidden);

  std::size_t inputs() const { return inputs_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t num_params() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  void init_uniform(double half_width, Rng& rng);

  double forward(std::span<const double> x) const;
  /// Output and its gradient with respect to the inputs (reverse sweep).
  double forward_input_grad(std::span<const double> x, std::span<double> dx) const;
  /// grad += adjoint * d(output)/d(params).
  void accumulate_param_grad(std::span<const double> x, double adjoint,
                             std::span<double> grad) const;

 private:
  std::size_t inputs_ = 0;
  std::size_t hidden_ = 0;
  std::vector<double> params_;
};

/// Input rescaling for the meta networks: the energy fed to them is the
/// rescaled energy U_bar (see EnergyScaling), momentum and gradient inputs are
/// divided by the scales below.
struct PreprocessStats {
  double momentum_scale = 1.0;
  double gradient_scale = 1.0;
  double n_observations = 1.0;
  double batch_size = 1.0;
  double dim_train = 0.0;
  double dim_test = 0.0;

  EnergyScaling energy_scaling() const { return {dim_train, dim_test}; }
  /// Factor multiplying -log p(theta) in U_bar: D_train / (N * D_test).
  double prior_factor() const { return energy_scaling().ratio() / n_observations; }
};

struct Interval {
  double lo = -5.0;
  double hi = 5.0;
};

/// Parameters of the per-coordinate curl (Q) and diffusion (D) networks:
///   f_Q,i = clamp(beta + net_Q(U_bar, p_i / s_p))
///   f_D,i = d_scale * softplus(net_D(U_bar, p_i / s_p, g_i / s_g))
///   D_f,i = alpha * f_Q,i^2 + f_D,i + c
struct MetaNets {
  Mlp q_net{2, 10};
  Mlp d_net{3, 10};
  double alpha = 1.0;
  double beta = 0.0;
  double c = 0.01;
  double d_scale = 1.0;
  Interval q_clamp{};
  bool clamp_enabled = false;
  /// When false f_D is identically zero ("constant mode"); the sampler then
  /// reduces to SGHMC with friction alpha * f_Q^2 + c.
  bool diffusion_net_enabled = true;
  PreprocessStats stats{};

  std::size_t num_params() const { return q_net.num_params() + d_net.num_params(); }
  /// phi = [phi_Q, phi_D].
  Vec flat_params() const;
  void set_flat_params(const Vec& phi);
  void validate() const;
};

struct NetsOptions {
  std::size_t hidden_q = 10;
  std::size_t hidden_d = 10;
  double init_half_width = 0.05;
  double alpha = 1.0;
  double beta = 0.0;
  double c = 0.01;
  double d_scale = 1.0;
  Interval q_clamp{};
};

MetaNets make_meta_nets(const NetsOptions& options, Rng& rng);

/// f_Q for one coordinate (p_i is the raw momentum).
double f_q(const MetaNets& nets, double u_scaled, double p_i);
/// f_D for one coordinate (p_i and g_i raw).
double f_d(const MetaNets& nets, double u_scaled, double p_i, double g_i);

/// Per-coordinate f_Q with partials w.r.t. U_bar and raw p_i. Partials are
/// zero where the clamp is active.
struct QEval {
  Vec value, d_du, d_dp;
};
/// Per-coordinate f_D with the partial w.r.t. raw p_i.
struct DEval {
  Vec value, d_dp;
};

void eval_q(const MetaNets& nets, double u_scaled, const Vec& p, bool with_partials, QEval& out);
void eval_d(const MetaNets& nets, double u_scaled, const Vec& p, const Vec& g,
            bool with_partials, DEval& out);

struct NetPartials {
  Vec dq_du, dq_dp, dd_dp;
};
NetPartials net_partials(const MetaNets& nets, double u_scaled, const Vec& p, const Vec& g);

/// Accumulates d/dphi of sum_i adjoint_q[i] * f_Q,i into grad[0 : |phi_Q|]
/// and of sum_i adjoint_d[i] * f_D,i into grad[|phi_Q| :]. Either adjoint
/// may be empty.
void accumulate_nets_param_grad(const MetaNets& nets, double u_scaled, const Vec& p,
                                const Vec& g, const Vec& adjoint_q, const Vec& adjoint_d,
                                std::span<double> grad);

double softplus(double x);

nlohmann::json to_json(const MetaNets& nets);
MetaNets meta_nets_from_json(const nlohmann::json& doc);
void save_checkpoint(const MetaNets& nets, const std::string& path);
MetaNets load_checkpoint(const std::string& path);

}  // namespace metasg

#endif  // METASG_META_NETS_HPP
