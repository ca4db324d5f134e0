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

#include "metasg/meta_nets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "metasg/error.hpp"

namespace metasg {

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(std::size_t inputs, std::size_t hidden)
    : inputs_(inputs), hidden_(hidden), params_(hidden * (inputs + 2) + 1, 0.0) {
  if (inputs == 0 || inputs > kMaxInputs) throw ContractError("Mlp supports 1..3 inputs");
  if (hidden == 0) throw ContractError("Mlp needs at least one hidden unit");
}

void Mlp::init_uniform(double half_width, Rng& rng) {
  for (auto& w : params_) w = rng.uniform(-half_width, half_width);
}

double Mlp::forward(std::span<const double> x) const {
  const double* w1 = params_.data();
  const double* b1 = w1 + hidden_ * inputs_;
  const double* w2 = b1 + hidden_;
  double out = w2[hidden_];
  for (std::size_t j = 0; j < hidden_; ++j) {
    double pre = b1[j];
    for (std::size_t k = 0; k < inputs_; ++k) pre += w1[j * inputs_ + k] * x[k];
    out += w2[j] * std::tanh(pre);
  }
  return out;
}

double Mlp::forward_input_grad(std::span<const double> x, std::span<double> dx) const {
  const double* w1 = params_.data();
  const double* b1 = w1 + hidden_ * inputs_;
  const double* w2 = b1 + hidden_;
  double out = w2[hidden_];
  std::fill(dx.begin(), dx.begin() + static_cast<std::ptrdiff_t>(inputs_), 0.0);
  for (std::size_t j = 0; j < hidden_; ++j) {
    double pre = b1[j];
    for (std::size_t k = 0; k < inputs_; ++k) pre += w1[j * inputs_ + k] * x[k];
    const double a = std::tanh(pre);
    out += w2[j] * a;
    const double back = w2[j] * (1.0 - a * a);
    for (std::size_t k = 0; k < inputs_; ++k) dx[k] += back * w1[j * inputs_ + k];
  }
  return out;
}

void Mlp::accumulate_param_grad(std::span<const double> x, double adjoint,
                                std::span<double> grad) const {
  const double* w1 = params_.data();
  const double* b1 = w1 + hidden_ * inputs_;
  const double* w2 = b1 + hidden_;
  double* gw1 = grad.data();
  double* gb1 = gw1 + hidden_ * inputs_;
  double* gw2 = gb1 + hidden_;
  for (std::size_t j = 0; j < hidden_; ++j) {
    double pre = b1[j];
    for (std::size_t k = 0; k < inputs_; ++k) pre += w1[j * inputs_ + k] * x[k];
    const double a = std::tanh(pre);
    const double back = adjoint * w2[j] * (1.0 - a * a);
    for (std::size_t k = 0; k < inputs_; ++k) gw1[j * inputs_ + k] += back * x[k];
    gb1[j] += back;
    gw2[j] += adjoint * a;
  }
  gw2[hidden_] += adjoint;
}

// ---------------------------------------------------------------------------
// MetaNets

Vec MetaNets::flat_params() const {
  Vec phi(static_cast<Eigen::Index>(num_params()));
  std::copy(q_net.params().begin(), q_net.params().end(), phi.data());
  std::copy(d_net.params().begin(), d_net.params().end(),
            phi.data() + q_net.num_params());
  return phi;
}

void MetaNets::set_flat_params(const Vec& phi) {
  if (static_cast<std::size_t>(phi.size()) != num_params()) {
    throw ContractError("flat parameter vector has the wrong length");
  }
  std::copy(phi.data(), phi.data() + q_net.num_params(), q_net.params().begin());
  std::copy(phi.data() + q_net.num_params(), phi.data() + phi.size(), d_net.params().begin());
}

void MetaNets::validate() const {
  if (q_net.inputs() != 2) throw ContractError("f_Q network must take 2 inputs");
  if (d_net.inputs() != 3) throw ContractError("f_D network must take 3 inputs");
  if (!(alpha > 0.0)) throw ContractError("alpha must be positive");
  if (!(c > 0.0)) throw ContractError("c must be positive");
  if (!(d_scale > 0.0)) throw ContractError("d_scale must be positive");
  if (!(q_clamp.lo < q_clamp.hi)) throw ContractError("q_clamp must be a non-empty interval");
  if (!(stats.momentum_scale > 0.0 && stats.gradient_scale > 0.0 &&
        stats.n_observations > 0.0 && stats.batch_size > 0.0)) {
    throw ContractError("preprocessing scales must be positive");
  }
}

MetaNets make_meta_nets(const NetsOptions& options, Rng& rng) {
  MetaNets nets;
  nets.q_net = Mlp(2, options.hidden_q);
  nets.d_net = Mlp(3, options.hidden_d);
  nets.q_net.init_uniform(options.init_half_width, rng);
  nets.d_net.init_uniform(options.init_half_width, rng);
  nets.alpha = options.alpha;
  nets.beta = options.beta;
  nets.c = options.c;
  nets.d_scale = options.d_scale;
  nets.q_clamp = options.q_clamp;
  nets.validate();
  return nets;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

bool clamped(const MetaNets& nets, double v) {
  return nets.clamp_enabled && (v < nets.q_clamp.lo || v > nets.q_clamp.hi);
}

}  // namespace

double f_q(const MetaNets& nets, double u_scaled, double p_i) {
  const std::array<double, 2> x{u_scaled, p_i / nets.stats.momentum_scale};
  const double v = nets.beta + nets.q_net.forward(x);
  return nets.clamp_enabled ? std::clamp(v, nets.q_clamp.lo, nets.q_clamp.hi) : v;
}

double f_d(const MetaNets& nets, double u_scaled, double p_i, double g_i) {
  if (!nets.diffusion_net_enabled) return 0.0;
  const std::array<double, 3> x{u_scaled, p_i / nets.stats.momentum_scale,
                                g_i / nets.stats.gradient_scale};
  return nets.d_scale * softplus(nets.d_net.forward(x));
}

void eval_q(const MetaNets& nets, double u_scaled, const Vec& p, bool with_partials,
            QEval& out) {
  const auto n = p.size();
  out.value.resize(n);
  if (with_partials) {
    out.d_du.resize(n);
    out.d_dp.resize(n);
  }
  const Mlp& net = nets.q_net;
  const std::size_t h = net.hidden();
  const double* w1 = net.params().data();
  const double* b1 = w1 + 2 * h;
  const double* w2 = b1 + h;
  const double b2 = w2[h];
  const double inv_sp = 1.0 / nets.stats.momentum_scale;

  thread_local std::vector<double> base;
  base.resize(h);
  for (std::size_t j = 0; j < h; ++j) base[j] = b1[j] + w1[2 * j] * u_scaled;

  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = p[i] * inv_sp;
    double v = b2, du = 0.0, dx = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double a = std::tanh(base[j] + w1[2 * j + 1] * x);
      v += w2[j] * a;
      if (with_partials) {
        const double back = w2[j] * (1.0 - a * a);
        du += back * w1[2 * j];
        dx += back * w1[2 * j + 1];
      }
    }
    v += nets.beta;
    if (clamped(nets, v)) {
      v = std::clamp(v, nets.q_clamp.lo, nets.q_clamp.hi);
      du = dx = 0.0;
    }
    out.value[i] = v;
    if (with_partials) {
      out.d_du[i] = du;
      out.d_dp[i] = dx * inv_sp;
    }
  }
}

void eval_d(const MetaNets& nets, double u_scaled, const Vec& p, const Vec& g,
            bool with_partials, DEval& out) {
  const auto n = p.size();
  if (!nets.diffusion_net_enabled) {
    out.value.setZero(n);
    if (with_partials) out.d_dp.setZero(n);
    return;
  }
  out.value.resize(n);
  if (with_partials) out.d_dp.resize(n);
  const Mlp& net = nets.d_net;
  const std::size_t h = net.hidden();
  const double* w1 = net.params().data();
  const double* b1 = w1 + 3 * h;
  const double* w2 = b1 + h;
  const double b2 = w2[h];
  const double inv_sp = 1.0 / nets.stats.momentum_scale;
  const double inv_sg = 1.0 / nets.stats.gradient_scale;

  thread_local std::vector<double> base;
  base.resize(h);
  for (std::size_t j = 0; j < h; ++j) base[j] = b1[j] + w1[3 * j] * u_scaled;

  for (Eigen::Index i = 0; i < n; ++i) {
    const double xp = p[i] * inv_sp;
    const double xg = g[i] * inv_sg;
    double raw = b2, dx = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double a = std::tanh(base[j] + w1[3 * j + 1] * xp + w1[3 * j + 2] * xg);
      raw += w2[j] * a;
      if (with_partials) dx += w2[j] * (1.0 - a * a) * w1[3 * j + 1];
    }
    out.value[i] = nets.d_scale * softplus(raw);
    if (with_partials) out.d_dp[i] = nets.d_scale * sigmoid(raw) * dx * inv_sp;
  }
}

NetPartials net_partials(const MetaNets& nets, double u_scaled, const Vec& p, const Vec& g) {
  if (p.size() != g.size()) throw ContractError("momentum and gradient lengths differ");
  QEval q;
  DEval d;
  eval_q(nets, u_scaled, p, true, q);
  eval_d(nets, u_scaled, p, g, true, d);
  return {std::move(q.d_du), std::move(q.d_dp), std::move(d.d_dp)};
}

void accumulate_nets_param_grad(const MetaNets& nets, double u_scaled, const Vec& p,
                                const Vec& g, const Vec& adjoint_q, const Vec& adjoint_d,
                                std::span<double> grad) {
  const double inv_sp = 1.0 / nets.stats.momentum_scale;
  const double inv_sg = 1.0 / nets.stats.gradient_scale;
  const std::size_t nq = nets.q_net.num_params();
  if (adjoint_q.size() > 0) {
    auto gq = grad.subspan(0, nq);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      if (adjoint_q[i] == 0.0) continue;
      const std::array<double, 2> x{u_scaled, p[i] * inv_sp};
      if (nets.clamp_enabled) {
        const double v = nets.beta + nets.q_net.forward(x);
        if (clamped(nets, v)) continue;
      }
      nets.q_net.accumulate_param_grad(x, adjoint_q[i], gq);
    }
  }
  if (adjoint_d.size() > 0 && nets.diffusion_net_enabled) {
    auto gd = grad.subspan(nq, nets.d_net.num_params());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      if (adjoint_d[i] == 0.0) continue;
      const std::array<double, 3> x{u_scaled, p[i] * inv_sp, g[i] * inv_sg};
      const double raw = nets.d_net.forward(x);
      nets.d_net.accumulate_param_grad(x, adjoint_d[i] * nets.d_scale * sigmoid(raw), gd);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr int kCheckpointVersion = 1;

nlohmann::json mlp_to_json(const Mlp& net) {
  const auto p = net.params();
  const std::size_t in = net.inputs(), h = net.hidden();
  return {{"inputs", in},
          {"hidden", h},
          {"activation", "tanh"},
          {"w1", std::vector<double>(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(h * in))},
          {"b1", std::vector<double>(p.begin() + static_cast<std::ptrdiff_t>(h * in),
                                     p.begin() + static_cast<std::ptrdiff_t>(h * in + h))},
          {"w2", std::vector<double>(p.begin() + static_cast<std::ptrdiff_t>(h * in + h),
                                     p.begin() + static_cast<std::ptrdiff_t>(h * in + 2 * h))},
          {"b2", p.back()}};
}

Mlp mlp_from_json(const nlohmann::json& j, std::size_t expected_inputs) {
  const auto in = j.at("inputs").get<std::size_t>();
  const auto h = j.at("hidden").get<std::size_t>();
  if (in != expected_inputs) throw ConfigError("checkpoint network has unexpected input count");
  Mlp net(in, h);
  const auto w1 = j.at("w1").get<std::vector<double>>();
  const auto b1 = j.at("b1").get<std::vector<double>>();
  const auto w2 = j.at("w2").get<std::vector<double>>();
  if (w1.size() != h * in || b1.size() != h || w2.size() != h) {
    throw ConfigError("checkpoint weight arrays do not match the declared shape");
  }
  auto p = net.params();
  std::copy(w1.begin(), w1.end(), p.begin());
  std::copy(b1.begin(), b1.end(), p.begin() + static_cast<std::ptrdiff_t>(h * in));
  std::copy(w2.begin(), w2.end(), p.begin() + static_cast<std::ptrdiff_t>(h * in + h));
  p.back() = j.at("b2").get<double>();
  return net;
}

}  // namespace

nlohmann::json to_json(const MetaNets& nets) {
  const auto& s = nets.stats;
  return {{"format", "metasg-checkpoint"},
          {"version", kCheckpointVersion},
          {"q_net", mlp_to_json(nets.q_net)},
          {"d_net", mlp_to_json(nets.d_net)},
          {"alpha", nets.alpha},
          {"beta", nets.beta},
          {"c", nets.c},
          {"d_scale", nets.d_scale},
          {"q_clamp", {nets.q_clamp.lo, nets.q_clamp.hi}},
          {"clamp_enabled", nets.clamp_enabled},
          {"diffusion_net_enabled", nets.diffusion_net_enabled},
          {"preprocess",
           {{"momentum_scale", s.momentum_scale},
            {"gradient_scale", s.gradient_scale},
            {"n_observations", s.n_observations},
            {"batch_size", s.batch_size},
            {"dim_train", s.dim_train},
            {"dim_test", s.dim_test}}}};
}

MetaNets meta_nets_from_json(const nlohmann::json& doc) {
  try {
    if (doc.value("format", std::string{}) != "metasg-checkpoint") {
      throw ConfigError("not a metasg checkpoint document");
    }
    if (doc.at("version").get<int>() != kCheckpointVersion) {
      throw ConfigError("unsupported checkpoint version");
    }
    MetaNets nets;
    nets.q_net = mlp_from_json(doc.at("q_net"), 2);
    nets.d_net = mlp_from_json(doc.at("d_net"), 3);
    nets.alpha = doc.at("alpha").get<double>();
    nets.beta = doc.at("beta").get<double>();
    nets.c = doc.at("c").get<double>();
    nets.d_scale = doc.at("d_scale").get<double>();
    const auto clamp = doc.at("q_clamp").get<std::vector<double>>();
    if (clamp.size() != 2) throw ConfigError("q_clamp must have two entries");
    nets.q_clamp = {clamp[0], clamp[1]};
    nets.clamp_enabled = doc.value("clamp_enabled", false);
    nets.diffusion_net_enabled = doc.value("diffusion_net_enabled", true);
    const auto& s = doc.at("preprocess");
    nets.stats.momentum_scale = s.at("momentum_scale").get<double>();
    nets.stats.gradient_scale = s.at("gradient_scale").get<double>();
    nets.stats.n_observations = s.at("n_observations").get<double>();
    nets.stats.batch_size = s.at("batch_size").get<double>();
    nets.stats.dim_train = s.at("dim_train").get<double>();
    nets.stats.dim_test = s.at("dim_test").get<double>();
    nets.validate();
    return nets;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ContractError& e) {
    throw ConfigError(std::string("invalid checkpoint: ") + e.what());
  }
}

void save_checkpoint(const MetaNets& nets, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint '" + path + "'");
  out << to_json(nets).dump(2) << '\n';
}

MetaNets load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open checkpoint '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint '" + path + "' is not valid JSON: " + e.what());
  }
  return meta_nets_from_json(doc);
}

}  // namespace metasg
