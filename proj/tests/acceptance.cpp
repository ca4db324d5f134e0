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

// Acceptance runner: one PASS/FAIL line per criterion.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "checks.hpp"
#include "metasg/diagnostics.hpp"
#include "metasg/error.hpp"
#include "metasg/experiment.hpp"

using namespace metasg;

namespace {

// Pinned tolerances.
constexpr double kReductionTol = 1e-12;
constexpr double kStationaryMeanTol = 0.05;
constexpr double kStationaryCovTol = 0.10;
constexpr double kSteinRatioTol = 0.1;
constexpr double kBpttRelTol = 1e-3;
constexpr double kEssRatioMin = 1.5;
constexpr int kToyWinsNeeded = 4;
constexpr double kGammaKlFactor = 2.0;
constexpr int kClassifierWinsNeeded = 3;
constexpr std::size_t kSeeds = 5;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string cache_dir;

RunConfig toy_config() { return preset_config("toy-gaussian"); }

RunConfig classifier_config() {
  RunConfig c = preset_config("mlp-nt");
  const std::string data = std::string(METASG_SOURCE_DIR) + "/data/digits.csv";
  c.train_task.bnn.dataset = data;
  c.test_task.bnn.dataset = data;
  return c;
}

std::string checkpoint_path(const RunConfig& c) {
  return (std::filesystem::path(cache_dir) / ("acceptance-" + c.preset + "-" + config_hash(c) + ".json")).string();
}

// Trains the preset once and caches the checkpoint under its config hash.
MetaNets trained_nets(const RunConfig& c) {
  const std::string path = checkpoint_path(c);
  if (std::filesystem::exists(path)) return load_checkpoint(path);
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult r = run_meta_train(c);
  std::filesystem::create_directories(cache_dir);
  save_checkpoint(r.nets, path);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("trained %s nets in %.1f s (%zu updates) -> %s\n", c.preset.c_str(), secs, r.log.size(), path.c_str());
  return r.nets;
}

RunResult evaluate(const RunConfig& c, const Task& task, const SamplerConfig& sc, const MetaNets* nets,
                   std::uint64_t seed) {
  const SamplerSpec spec = resolve_sampler(sc, task, seed, c.resolved_workers(), nets);
  return run_sampler(task, spec, c.eval, seed, c.resolved_workers());
}

Outcome criterion_reduction() {
  const double diff = checks::sghmc_reduction_max_diff(10, 1000, 2026);
  return {diff <= kReductionTol, "max state gap " + fmt("%.3e", diff) + " (tol 1e-12)"};
}

Outcome criterion_stationarity() {
  const auto e = checks::sghmc_stationarity(1e-3, 10, 10000, 200000, 2026, 0);
  const bool pass = e.max_mean_abs <= kStationaryMeanTol && e.max_cov_rel <= kStationaryCovTol;
  return {pass, "mean abs err " + fmt("%.4f", e.max_mean_abs) + " (tol 0.05), cov rel err " +
                    fmt("%.4f", e.max_cov_rel) + " (tol 0.10)"};
}

Outcome criterion_stein() {
  const auto o = checks::stein_gaussian_oracle(200, 2, 0.5, 1e-3, 2026);
  return {o.ratio() <= kSteinRatioTol,
          "MSE / mean squared score norm = " + fmt("%.3f", o.ratio()) + " (tol 0.1)"};
}

Outcome criterion_bptt() {
  Mat cov(2, 2);
  cov << 1.0, 0.3, 0.3, 0.6;
  const auto model = GaussianTarget::from_covariance(Vec::Constant(2, 0.5), cov, 0.0);
  TrainConfig c;
  c.chains = 4;
  c.unroll = 5;
  c.truncation = 5;
  c.cross_stride = 1;
  c.weight_in = 0.0;
  c.init_lo = -1.0;
  c.init_hi = 2.0;
  c.step.eta = 0.05;
  c.step.gamma = GammaMode::kFiniteDifference;
  Rng rng(2026, 0);
  NetsOptions o;
  o.hidden_q = o.hidden_d = 10;
  o.init_half_width = 0.4;
  o.alpha = 0.5;
  o.beta = 1.0;
  o.c = 0.1;
  const MetaNets nets = make_meta_nets(o, rng);
  const auto g = checks::bptt_fd_check(nets, model, c, 2026);
  return {g.max_rel_err <= kBpttRelTol, std::to_string(g.analytic.size()) +
                                            " components, max rel err " + fmt("%.3e", g.max_rel_err) +
                                            " (tol 1e-3)"};
}

Outcome criterion_toy() {
  const RunConfig c = toy_config();
  const MetaNets nets = trained_nets(c);
  const Task task = build_task(c.test_task);
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const RunResult nn = evaluate(c, task, c.compare[0], &nets, s);
    const RunResult sg = evaluate(c, task, c.compare[1], nullptr, s);
    const double kl_nn = nn.final_metrics.at("kl"), kl_sg = sg.final_metrics.at("kl");
    const double ratio = nn.final_metrics.at("ess") / sg.final_metrics.at("ess");
    const bool win = kl_nn < kl_sg && ratio >= kEssRatioMin;
    wins += win;
    per_seed += " [seed " + std::to_string(s) + ": KL " + fmt("%.4f", kl_nn) + " vs " + fmt("%.4f", kl_sg) +
                ", ESS ratio " + fmt("%.2f", ratio) + (win ? " win]" : " loss]");
    std::fflush(stdout);
  }
  return {wins >= kToyWinsNeeded, std::to_string(wins) + "/5 seeds with lower KL and ESS ratio >= 1.5 (need 4)" + per_seed};
}

Outcome criterion_gamma() {
  const RunConfig c = toy_config();
  const MetaNets nets = trained_nets(c);
  const Task task = build_task(c.test_task);
  SamplerConfig fd = c.compare[0];
  fd.gamma = "finite-difference";
  SamplerConfig exact = fd;
  exact.gamma = "exact";
  double sum_fd = 0.0, sum_ex = 0.0;
  std::string per_seed;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const double a = evaluate(c, task, fd, &nets, s).final_metrics.at("kl");
    const double b = evaluate(c, task, exact, &nets, s).final_metrics.at("kl");
    sum_fd += a;
    sum_ex += b;
    per_seed += " [seed " + std::to_string(s) + ": " + fmt("%.4f", a) + " vs " + fmt("%.4f", b) + "]";
  }
  const double ratio = sum_fd / sum_ex;
  const bool pass = ratio <= kGammaKlFactor && ratio >= 1.0 / kGammaKlFactor;
  return {pass, "mean KL finite-difference / exact = " + fmt("%.3f", ratio) + " (must lie in [0.5, 2])" + per_seed};
}

Outcome criterion_classifier() {
  const RunConfig c = classifier_config();
  const MetaNets nets = trained_nets(c);
  const Task task = build_task(c.test_task);
  int wins = 0;
  std::string per_seed;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const double nn = evaluate(c, task, c.compare[0], &nets, s).final_metrics.at("test_nll");
    const double sg = evaluate(c, task, c.compare[1], nullptr, s).final_metrics.at("test_nll");
    wins += nn <= sg;
    per_seed += " [seed " + std::to_string(s) + ": " + fmt("%.4f", nn) + " vs " + fmt("%.4f", sg) + "]";
  }
  return {wins >= kClassifierWinsNeeded,
          std::to_string(wins) + "/5 seeds with NNSGHMC test NLL <= SGHMC (need 3)" + per_seed};
}

Outcome criterion_properties() {
  std::vector<std::string> failed;
  Rng rng(2026, 8);
  auto rv = [&](Eigen::Index n, double sc = 1.0) {
    Vec v(n);
    for (auto& x : v) x = sc * rng.normal();
    return v;
  };
  auto random_nets = [&](double hw) {
    NetsOptions o;
    o.hidden_q = o.hidden_d = 6;
    o.init_half_width = hw;
    o.alpha = rng.uniform(0.01, 2.0);
    o.c = rng.uniform(0.001, 0.5);
    o.beta = rng.uniform(-1.0, 1.0);
    o.d_scale = rng.uniform(0.5, 3.0);
    return make_meta_nets(o, rng);
  };

  bool skew_psd = true, nonneg = true;
  for (int t = 0; t < 200; ++t) {
    const MetaNets n = random_nets(2.0);
    SamplerState s = make_state(rv(5), rv(5, 3.0));
    const Preconditioners pc = build_preconditioners(s, n, rng.normal(), rv(5, 5.0));
    const Mat q = assemble_curl(pc.q);
    skew_psd &= (q + q.transpose()).cwiseAbs().maxCoeff() == 0.0 && pc.d.minCoeff() >= n.c;
    for (int i = 0; i < 20; ++i) nonneg &= f_d(n, 10 * rng.normal(), 10 * rng.normal(), 10 * rng.normal()) >= 0.0;
  }
  if (!skew_psd) failed.push_back("skew/PSD");
  if (!nonneg) failed.push_back("f_D >= 0");

  double worst = 0.0;
  const double h = 1e-6;
  for (int t = 0; t < 1000; ++t) {
    MetaNets n = random_nets(1.0);
    n.stats.momentum_scale = rng.uniform(0.5, 2.0);
    n.stats.gradient_scale = rng.uniform(0.5, 2.0);
    const double u = rng.normal(), p = rng.normal(), g = rng.normal();
    const NetPartials part = net_partials(n, u, Vec::Constant(1, p), Vec::Constant(1, g));
    worst = std::max({worst,
                      std::abs((f_q(n, u + h, p) - f_q(n, u - h, p)) / (2 * h) - part.dq_du[0]),
                      std::abs((f_q(n, u, p + h) - f_q(n, u, p - h)) / (2 * h) - part.dq_dp[0]),
                      std::abs((f_d(n, u, p + h, g) - f_d(n, u, p - h, g)) / (2 * h) - part.dd_dp[0])});
  }
  if (worst > 1e-6) failed.push_back("net partials FD " + fmt("%.2e", worst));

  bool kl_ok = true;
  for (int t = 0; t < 50; ++t) {
    Mat x(30, 3);
    for (Eigen::Index i = 0; i < 30; ++i) x.row(i) = rv(3).transpose();
    const Vec m = x.colwise().mean().transpose();
    const Mat cen = x.rowwise() - m.transpose();
    const Mat cov = cen.transpose() * cen / 29.0;
    kl_ok &= std::abs(fit_gaussian_kl(x, m, cov)) <= 1e-12;
    kl_ok &= fit_gaussian_kl(x, rv(3), random_covariance(3, true, 0.3, 3.0, rng)) >= 0.0;
  }
  if (!kl_ok) failed.push_back("KL >= 0 / zero at match");

  bool ess_ok = true;
  for (double rho : {-0.9, 0.0, 0.5, 0.99}) {
    Vec x(1000);
    double v = 0.0;
    for (auto& e : x) e = v = rho * v + rng.normal();
    const double e = ess(x);
    ess_ok &= e >= 1.0 && e <= 1000.0;
  }
  ess_ok &= ess(Vec(Vec::Constant(50, 1.0))) == 1.0;
  if (!ess_ok) failed.push_back("ESS bounds");

  bool det = true;
  {
    const auto model = GaussianTarget::from_covariance(Vec::Ones(3), random_covariance(3, true, 0.5, 2.0, rng), 1.0);
    SamplerSpec spec;
    spec.kind = SamplerKind::kNnsghmc;
    spec.step.eta = 0.03;
    spec.step.gamma = GammaMode::kFiniteDifference;
    spec.nets = std::make_shared<const MetaNets>(random_nets(0.3));
    std::vector<SamplerState> base;
    for (int k = 0; k < 4; ++k) base.push_back(make_state(rv(3), rv(3)));
    for (SamplerKind kind : {SamplerKind::kNnsghmc, SamplerKind::kSghmc, SamplerKind::kSgld, SamplerKind::kPsgld}) {
      spec.kind = kind;
      auto a = base, b = base;
      run_chains(spec, model, a, 300, 5, 1);
      run_chains(spec, model, b, 300, 5, 3);
      for (std::size_t k = 0; k < a.size(); ++k) det &= a[k].theta == b[k].theta && a[k].momentum == b[k].momentum;
    }
  }
  if (!det) failed.push_back("determinism");

  std::string detail = "skew/PSD, f_D >= 0, net-partial FD (max " + fmt("%.1e", worst) +
                       "), KL >= 0 with zero at match, ESS in [1, N], determinism";
  if (!failed.empty()) {
    detail += "; failed:";
    for (const auto& f : failed) detail += " " + f;
  }
  return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string train;
  cache_dir = "acceptance-cache";
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_option("--train", train, "only train and cache nets for a preset")
      ->check(CLI::IsMember({"toy-gaussian", "mlp-nt"}));
  app.add_option("--cache-dir", cache_dir, "directory for cached checkpoints");
  CLI11_PARSE(app, argc, argv);

  try {
    if (!train.empty()) {
      trained_nets(train == "toy-gaussian" ? toy_config() : classifier_config());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "training failed: %s\n", e.what());
    return 1;
  }

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"sghmc-reduction", criterion_reduction},   {"stationarity", criterion_stationarity},
      {"stein-oracle", criterion_stein},          {"bptt-gradient", criterion_bptt},
      {"toy-reproduction", criterion_toy},        {"fd-gamma-fidelity", criterion_gamma},
      {"classifier-nll", criterion_classifier},   {"property-suites", criterion_properties}};
  const std::set<int> selected(only.begin(), only.end());
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %d %-18s %s  %s (%.1f s)\n", id, criteria[i].first, o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
    all &= o.pass;
  }
  return all ? 0 : 1;
}
