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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <Eigen/Eigenvalues>

#include "checks.hpp"
#include "metasg/dynamics.hpp"
#include "metasg/error.hpp"
#include "metasg/experiment.hpp"
#include "test_util.hpp"

using namespace metasg;
using namespace metasg::testing;

namespace {

// Energy model exposing only a data-set size, for step-size rules.
class SizedModel final : public EnergyModel {
 public:
  explicit SizedModel(std::size_t n) : n_(n) {}
  std::size_t dim() const override { return 1; }
  std::string kind() const override { return "sized"; }
  double energy(const Vec& t) const override { return 0.5 * t.squaredNorm(); }
  Vec grad_energy(const Vec& t) const override { return t; }
  EnergyTerms stochastic_terms(const Vec& t, std::size_t, Rng&) const override {
    EnergyTerms e;
    e.prior_term = energy(t);
    e.prior_grad = t;
    e.data_grad = Vec::Zero(t.size());
    return e;
  }
  std::size_t num_observations() const override { return n_; }

 private:
  std::size_t n_;
};

// f_Q(U, p) ~ U * p from four tanh units using
// U p = ((U + p)^2 - (U - p)^2) / 4 and
// tanh(b + a s) + tanh(b - a s) - 2 tanh(b) ~ tanh''(b) a^2 s^2.
MetaNets bilinear_surrogate(double a = 1e-3, double b = 0.5) {
  MetaNets n;
  n.q_net = Mlp(2, 4);
  n.d_net = Mlp(3, 2);
  n.beta = 0.0;
  const double th = std::tanh(b);
  const double second = -2.0 * th * (1.0 - th * th);
  const double k = 1.0 / (4.0 * second * a * a);
  const double w1[4][2] = {{a, a}, {-a, -a}, {a, -a}, {-a, a}};
  const double w2[4] = {k, k, -k, -k};
  auto params = n.q_net.params();
  for (int j = 0; j < 4; ++j) {
    params[static_cast<std::size_t>(2 * j)] = w1[j][0];
    params[static_cast<std::size_t>(2 * j + 1)] = w1[j][1];
    params[static_cast<std::size_t>(8 + j)] = b;
    params[static_cast<std::size_t>(12 + j)] = w2[j];
  }
  return n;
}

// f_Q(U, p) ~ p from a single tanh(a p) / a unit.
MetaNets identity_surrogate(double a = 1e-4) {
  MetaNets n;
  n.q_net = Mlp(2, 1);
  n.d_net = Mlp(3, 2);
  n.beta = 0.0;
  auto params = n.q_net.params();
  params[1] = a;
  params[3] = 1.0 / a;
  return n;
}

QEval q_eval(const MetaNets& n, double u, const Vec& p) {
  QEval q;
  eval_q(n, u, p, true, q);
  return q;
}

}  // namespace

TEST_SUITE("dynamics") {
  TEST_CASE("preconditioner examples") {
    MetaNets n = zero_nets();
    n.beta = 1.0;
    n.alpha = 0.5;
    n.c = 0.01;
    n.d_scale = 1.0;
    SamplerState s = make_state(Vec::Zero(3), Vec::Ones(3));
    Preconditioners pc = build_preconditioners(s, n, 0.2, Vec::Ones(3));
    for (Eigen::Index i = 0; i < 3; ++i) {
      CHECK(pc.q[i] == 1.0);
      CHECK(pc.d[i] == doctest::Approx(0.5 + std::log(2.0) + 0.01).epsilon(1e-14));
      CHECK(pc.d[i] == doctest::Approx(1.203).epsilon(1e-3));
    }
    n.beta = 2.0;
    n.d_scale = 1.0 / std::log(2.0);
    pc = build_preconditioners(s, n, 0.2, Vec::Ones(3));
    CHECK(pc.d[0] == doctest::Approx(3.01).epsilon(1e-14));
  }

  TEST_CASE("momentum decay rule gives alpha near 29.27") {
    Task task;
    task.model = std::make_shared<SizedModel>(60000);
    SamplerConfig sc;
    sc.kind = "sghmc";
    sc.per_batch_lr = 0.007;
    sc.momentum_decay = 0.01;
    const SamplerSpec spec = resolve_sampler(sc, task, 0, 1);
    CHECK(spec.hyper.eta == doctest::Approx(3.416e-4).epsilon(1e-3));
    CHECK(spec.hyper.friction == doctest::Approx(29.27).epsilon(1e-3));

    sc.kind = "nnsghmc";
    sc.recalibrate = false;
    Rng rng(1, 0);
    const MetaNets nets = random_nets(rng);
    const SamplerSpec nn = resolve_sampler(sc, task, 0, 1, &nets);
    CHECK(nn.nets->alpha == doctest::Approx(0.01 / std::sqrt(0.007 / 60000.0)).epsilon(1e-12));

    sc.kind = "sgld";
    const SamplerSpec sgld = resolve_sampler(sc, task, 0, 1);
    CHECK(sgld.hyper.eta == doctest::Approx(0.007 / 60000.0).epsilon(1e-12));
  }

  TEST_CASE("assembled curl is skew-symmetric and diffusion is PSD") {
    Rng rng(2, 0);
    for (int trial = 0; trial < 20; ++trial) {
      MetaNets n = random_nets(rng, 2.0, 5);
      n.alpha = rng.uniform(0.01, 2.0);
      n.c = rng.uniform(0.001, 0.5);
      SamplerState s = make_state(random_vec(4, rng), random_vec(4, rng, 3.0));
      const Preconditioners pc = build_preconditioners(s, n, rng.normal(), random_vec(4, rng, 5.0));
      const Mat q = assemble_curl(pc.q);
      CHECK((q + q.transpose()).cwiseAbs().maxCoeff() == 0.0);
      CHECK(pc.d.minCoeff() >= n.c);
      const Mat d = assemble_diffusion(pc.d);
      CHECK((d - d.transpose()).norm() == 0.0);
      Eigen::SelfAdjointEigenSolver<Mat> es(d);
      CHECK(es.eigenvalues().minCoeff() >= 0.0);
    }
  }

  TEST_CASE("constant nets give zero Gamma in every mode") {
    MetaNets n = zero_nets();
    n.beta = 1.3;
    n.diffusion_net_enabled = false;
    GaussianTarget g(Vec::Zero(3), Mat::Identity(3, 3), 0.5);
    for (GammaMode mode : {GammaMode::kExact, GammaMode::kFiniteDifference}) {
      StepConfig cfg;
      cfg.eta = 0.05;
      cfg.gamma = mode;
      SamplerState s = make_state(Vec::Ones(3), Vec::Ones(3));
      Rng rng(3, 0);
      for (int t = 0; t < 5; ++t) {
        StepRecord rec;
        nnsghmc_advance(s, g, n, cfg, rng, &rec);
        CHECK(rec.gamma_theta.isZero(0.0));
        CHECK(rec.gamma_p.isZero(0.0));
      }
    }
  }

  TEST_CASE("bilinear surrogate gives Gamma_theta = -U") {
    const MetaNets n = bilinear_surrogate();
    const double u = 0.8;
    Vec p(3);
    p << 0.3, -0.5, 0.9;
    const QEval q = q_eval(n, u, p);
    for (Eigen::Index i = 0; i < 3; ++i) CHECK(q.value[i] == doctest::Approx(u * p[i]).epsilon(1e-4));
    const Vec exact = gamma_theta(GammaMode::kExact, q, p, nullptr, nullptr, 1e-8);
    for (Eigen::Index i = 0; i < 3; ++i) CHECK(exact[i] == doctest::Approx(-u).epsilon(1e-4));

    for (double dp : {1e-4, 1e-5}) {
      const Vec p_prev = p.array() - dp;
      const Vec q_prev = q_eval(n, u, p_prev).value;
      const Vec fd = gamma_theta(GammaMode::kFiniteDifference, q, p, &p_prev, &q_prev, 1e-8);
      for (Eigen::Index i = 0; i < 3; ++i) CHECK(rel_err(fd[i], -u) <= 0.01);
    }
  }

  TEST_CASE("identity surrogate gives Gamma_theta = -1") {
    const MetaNets n = identity_surrogate();
    Vec p(4);
    p << -1.0, 0.0, 0.5, 2.0;
    const QEval q = q_eval(n, 0.3, p);
    const Vec g = gamma_theta(GammaMode::kExact, q, p, nullptr, nullptr, 1e-8);
    for (Eigen::Index i = 0; i < 4; ++i) {
      CHECK(q.value[i] == doctest::Approx(p[i]).epsilon(1e-6));
      CHECK(g[i] == doctest::Approx(-1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("secant denominators under the floor fall back to the exact partial") {
    Rng rng(4, 0);
    const MetaNets n = random_nets(rng, 1.0, 5);
    const Vec p = random_vec(3, rng);
    Vec p_prev = p;
    p_prev[1] += 0.3;
    const QEval q = q_eval(n, 0.1, p);
    const Vec q_prev = q_eval(n, 0.1, p_prev).value;
    const Vec fd = gamma_theta(GammaMode::kFiniteDifference, q, p, &p_prev, &q_prev, 1e-8);
    CHECK(fd[0] == -q.d_dp[0]);
    CHECK(fd[2] == -q.d_dp[2]);
    CHECK(fd[1] == doctest::Approx(-(q.value[1] - q_prev[1]) / (p[1] - p_prev[1])));
    CHECK(gamma_theta(GammaMode::kOff, q, p, &p_prev, &q_prev, 1e-8).isZero(0.0));
  }

  TEST_CASE("finite-difference Gamma converges to the exact Gamma") {
    Rng rng(5, 0);
    MetaNets n = random_nets(rng, 0.8, 6);
    n.alpha = 0.7;
    n.d_scale = 1.5;
    const auto dim = 5;
    const Vec p = random_vec(dim, rng), grad = random_vec(dim, rng), sgrad = random_vec(dim, rng);
    const double u_new = 0.4;
    double prev_err_theta = 1e300, prev_err_p = 1e300;
    for (double inc : {1e-2, 1e-3, 1e-4}) {
      const Vec dp = random_vec(dim, rng).cwiseSign() * inc;
      const Vec p_prev = p - dp;
      const double u_old = u_new - inc;
      QEval q_new;
      eval_q(n, u_new, p, true, q_new);
      DEval d_new;
      eval_d(n, u_new, p, grad, true, d_new);
      QEval q_old_u;
      eval_q(n, u_old, p, true, q_old_u);
      // Cache entries as the sampler keeps them: f_Q at the same U with p_{t-1}.
      const Vec q_prev = q_eval(n, u_old, p_prev).value;
      DEval d_old_p;
      eval_d(n, u_new, p_prev, grad, false, d_old_p);

      Vec dq_dp_fd, dq_dp_ex;
      const Vec gt_fd = gamma_theta(GammaMode::kFiniteDifference, q_old_u, p, &p_prev, &q_prev, 1e-8, &dq_dp_fd);
      const Vec gt_ex = gamma_theta(GammaMode::kExact, q_old_u, p, nullptr, nullptr, 1e-8, &dq_dp_ex);

      GammaPInputs in;
      in.q_new = &q_new;
      in.d_new = &d_new;
      in.scaled_grad = &sgrad;
      in.alpha = n.alpha;
      const Vec gp_ex = gamma_p(GammaMode::kExact, in, 1e-8);
      in.q_old_u = &q_old_u.value;
      in.u_new = u_new;
      in.u_old = u_old;
      in.dq_dp = &dq_dp_fd;
      in.d_old_p = &d_old_p.value;
      in.p_now = &p;
      in.p_prev = &p_prev;
      const Vec gp_fd = gamma_p(GammaMode::kFiniteDifference, in, 1e-8);

      const double err_theta = (gt_fd - gt_ex).norm() / gt_ex.norm();
      const double err_p = (gp_fd - gp_ex).norm() / gp_ex.norm();
      CHECK(err_theta < prev_err_theta);
      CHECK(err_p < prev_err_p);
      prev_err_theta = err_theta;
      prev_err_p = err_p;
      if (inc <= 1e-4) {
        CHECK(err_theta <= 0.01);
        CHECK(err_p <= 0.01);
      }
    }
  }

  TEST_CASE("one deterministic step on a 1D quadratic") {
    MetaNets n = zero_nets();
    n.beta = 1.0;
    n.alpha = 0.5;
    n.c = 0.5;
    n.diffusion_net_enabled = false;
    GaussianTarget g(Vec::Zero(1), Mat::Identity(1, 1));
    StepConfig cfg;
    cfg.eta = 0.1;
    cfg.noise_on = false;
    cfg.gamma = GammaMode::kOff;
    Rng rng(6, 0);
    const SamplerState s = nnsghmc_step(make_state(Vec::Ones(1), Vec::Zero(1)), g, n, cfg, rng);
    CHECK(s.theta[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.momentum[0] == doctest::Approx(-0.1).epsilon(1e-15));
    CHECK(s.step == 1);
  }

  TEST_CASE("divergence is reported with the step index") {
    GaussianTarget g(Vec::Zero(2), 1e8 * Mat::Identity(2, 2));
    MetaNets n = zero_nets();
    n.beta = 1.0;
    StepConfig cfg;
    cfg.eta = 1.0;
    SamplerState s = make_state(Vec::Ones(2), Vec::Ones(2));
    Rng rng(7, 0);
    bool thrown = false;
    try {
      for (int t = 0; t < 1000; ++t) nnsghmc_advance(s, g, n, cfg, rng);
    } catch (const DivergenceError& e) {
      thrown = true;
      CHECK(e.step() >= 1);
      CHECK(e.step() < 1000);
    }
    CHECK(thrown);
    BaselineHyper h;
    h.eta = 1.0;
    SamplerState b = make_state(Vec::Ones(2), Vec::Ones(2));
    CHECK_THROWS_AS(
        [&] { for (int t = 0; t < 1000; ++t) baseline_advance(BaselineKind::kSgld, b, g, h, rng); }(),
        DivergenceError);
  }

  TEST_CASE("step size must be positive") {
    GaussianTarget g(Vec::Zero(1), Mat::Identity(1, 1));
    Rng rng(8, 0);
    StepConfig cfg;
    cfg.eta = 0.0;
    CHECK_THROWS_AS(nnsghmc_step(make_state(Vec::Zero(1), Vec::Zero(1)), g, zero_nets(), cfg, rng), ContractError);
    BaselineHyper h;
    h.eta = -1.0;
    CHECK_THROWS_AS(baseline_step(BaselineKind::kSghmc, make_state(Vec::Zero(1), Vec::Zero(1)), g, h, rng), ContractError);
  }

  TEST_CASE("baseline hand steps") {
    GaussianTarget g(Vec::Zero(1), Mat::Identity(1, 1));
    Rng rng(9, 0);
    BaselineHyper h;
    h.eta = 0.1;
    h.friction = 1.0;
    h.noise_on = false;

    SamplerState sgld = baseline_step(BaselineKind::kSgld, make_state(Vec::Zero(1), Vec::Zero(1)), g, h, rng);
    CHECK(sgld.theta[0] == 0.0);

    SamplerState sghmc = baseline_step(BaselineKind::kSghmc, make_state(Vec::Zero(1), Vec::Ones(1)), g, h, rng);
    CHECK(sghmc.momentum[0] == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(sghmc.theta[0] == doctest::Approx(0.09).epsilon(1e-15));

    SamplerState ps = baseline_step(BaselineKind::kPsgld, make_state(Vec::Constant(1, 2.0), Vec::Zero(1)), g, h, rng);
    const double v = 0.01 * 4.0;
    const double precond = 1.0 / (std::sqrt(v) + 1e-5);
    CHECK(ps.second_moment[0] == doctest::Approx(v).epsilon(1e-14));
    CHECK(ps.theta[0] == doctest::Approx(2.0 - 0.05 * precond * 2.0).epsilon(1e-14));
  }

  TEST_CASE("baseline noise has the stated variance") {
    GaussianTarget g(Vec::Zero(1), Mat::Identity(1, 1));
    Rng rng(10, 0);
    BaselineHyper h;
    h.eta = 0.02;
    h.friction = 3.0;
    const int n = 40000;
    double s2_sgld = 0.0, s2_sghmc = 0.0;
    for (int i = 0; i < n; ++i) {
      const SamplerState a = baseline_step(BaselineKind::kSgld, make_state(Vec::Zero(1), Vec::Zero(1)), g, h, rng);
      s2_sgld += a.theta[0] * a.theta[0];
      const SamplerState b = baseline_step(BaselineKind::kSghmc, make_state(Vec::Zero(1), Vec::Zero(1)), g, h, rng);
      s2_sghmc += b.momentum[0] * b.momentum[0];
    }
    CHECK(s2_sgld / n == doctest::Approx(2.0 * 0.02).epsilon(0.03));
    CHECK(s2_sghmc / n == doctest::Approx(2.0 * 0.02 * 3.0).epsilon(0.03));
  }

  TEST_CASE("constant-mode nets reduce to SGHMC") {
    CHECK(checks::sghmc_reduction_max_diff(10, 1000, 11) <= 1e-12);
    CHECK(checks::sghmc_reduction_max_diff(3, 200, 12) <= 1e-12);
  }

  TEST_CASE("short-run stationarity of SGHMC") {
    const auto e = checks::sghmc_stationarity(1e-2, 8, 2000, 40000, 13, 4);
    CHECK(e.max_mean_abs <= 0.1);
    CHECK(e.max_cov_rel <= 0.15);
  }

  TEST_CASE("identical seeds give identical trajectories for any worker count") {
    Rng setup(14, 0);
    auto g = GaussianTarget::from_covariance(Vec::Constant(4, 1.0), random_covariance(4, true, 0.5, 2.0, setup), 1.0);
    SamplerSpec spec;
    spec.kind = SamplerKind::kNnsghmc;
    spec.step.eta = 0.03;
    spec.step.gamma = GammaMode::kFiniteDifference;
    spec.nets = std::make_shared<const MetaNets>(random_nets(setup, 0.3, 5));
    std::vector<SamplerState> base;
    for (int k = 0; k < 6; ++k) base.push_back(make_state(random_vec(4, setup), random_vec(4, setup)));
    auto run = [&](std::size_t workers, SamplerKind kind) {
      SamplerSpec s = spec;
      s.kind = kind;
      std::vector<SamplerState> states = base;
      run_chains(s, g, states, 200, 99, workers);
      return states;
    };
    for (SamplerKind kind : {SamplerKind::kNnsghmc, SamplerKind::kSghmc, SamplerKind::kSgld, SamplerKind::kPsgld}) {
      const auto a = run(1, kind), b = run(1, kind), c = run(4, kind);
      for (std::size_t k = 0; k < a.size(); ++k) {
        CHECK(a[k].theta == b[k].theta);
        CHECK(a[k].theta == c[k].theta);
        CHECK(a[k].momentum == c[k].momentum);
      }
    }
  }

  TEST_CASE("sampler and gamma names parse") {
    CHECK(parse_sampler_kind("psgld") == SamplerKind::kPsgld);
    CHECK(to_string(SamplerKind::kNnsghmc) == "nnsghmc");
    CHECK_THROWS_AS(parse_sampler_kind("bogus"), ConfigError);
    CHECK(parse_gamma_mode(to_string(GammaMode::kFiniteDifference)) == GammaMode::kFiniteDifference);
    CHECK_THROWS_AS(parse_gamma_mode("bogus"), ConfigError);
  }
}
