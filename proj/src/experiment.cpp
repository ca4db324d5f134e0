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

#include "metasg/experiment.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "metasg/error.hpp"
#include "metasg/parallel.hpp"

namespace metasg {

using nlohmann::json;

std::size_t RunConfig::resolved_workers() const {
  return workers == 0 ? default_workers() : workers;
}

// ---------------------------------------------------------------------------
// JSON conversion

namespace {

json gaussian_json(const GaussianTaskSpec& g) {
  return {{"dim", g.dim},           {"mean", g.mean},     {"correlated", g.correlated},
          {"eig_lo", g.eig_lo},     {"eig_hi", g.eig_hi}, {"noise_std", g.noise_std},
          {"cov_seed", g.cov_seed}};
}

json bnn_json(const BnnTaskSpec& b) {
  return {{"dataset", b.dataset},
          {"test_fraction", b.test_fraction},
          {"split_seed", b.split_seed},
          {"hidden", b.hidden},
          {"activation", b.activation},
          {"prior_precision", b.prior_precision},
          {"batch_size", b.batch_size},
          {"standardize", b.standardize}};
}

json task_json(const TaskSpec& t) {
  return {{"kind", t.kind},
          {"gaussian", gaussian_json(t.gaussian)},
          {"bnn", bnn_json(t.bnn)},
          {"init_lo", t.init_lo},
          {"init_hi", t.init_hi}};
}

json sampler_json(const SamplerConfig& s) {
  return {{"kind", s.kind},
          {"label", s.label},
          {"eta", s.eta},
          {"per_batch_lr", s.per_batch_lr},
          {"momentum_decay", s.momentum_decay},
          {"gamma", s.gamma},
          {"noise", s.noise},
          {"fd_floor", s.fd_floor},
          {"friction", s.friction},
          {"rho", s.rho},
          {"kappa", s.kappa},
          {"checkpoint", s.checkpoint},
          {"clamp", s.clamp},
          {"clamp_lo", s.clamp_lo},
          {"clamp_hi", s.clamp_hi},
          {"recalibrate", s.recalibrate},
          {"pilot_steps", s.pilot_steps}};
}

json nets_json(const NetsOptions& n) {
  return {{"hidden_q", n.hidden_q}, {"hidden_d", n.hidden_d},
          {"init_half_width", n.init_half_width},
          {"alpha", n.alpha},       {"beta", n.beta},
          {"c", n.c},               {"d_scale", n.d_scale}};
}

json train_json(const TrainConfig& t) {
  return {{"chains", t.chains},
          {"unroll", t.unroll},
          {"truncation", t.truncation},
          {"cross_stride", t.cross_stride},
          {"burn_in", t.burn_in},
          {"in_chain_subsample", t.in_chain_subsample},
          {"thinning", t.thinning},
          {"ridge", t.ridge},
          {"bandwidth_multiplier", t.bandwidth_multiplier},
          {"learning_rate", t.learning_rate},
          {"epochs", t.epochs},
          {"sub_epochs", t.sub_epochs},
          {"weight_cross", t.weight_cross},
          {"weight_in", t.weight_in},
          {"pilot_steps", t.pilot_steps},
          {"max_consecutive_divergences", t.max_consecutive_divergences},
          {"grad_clip", t.grad_clip}};
}

json eval_json(const EvalSpec& e) {
  return {{"chains", e.chains},   {"steps", e.steps},     {"burn_in", e.burn_in},
          {"thin", e.thin},       {"curve_every", e.curve_every},
          {"metrics", e.metrics}, {"seeds", e.seeds},     {"format", e.format}};
}

template <typename T>
void rd(const json& j, const char* key, T& v) {
  if (j.contains(key)) v = j.at(key).get<T>();
}

void gaussian_from(const json& j, GaussianTaskSpec& g) {
  rd(j, "dim", g.dim);
  rd(j, "mean", g.mean);
  rd(j, "correlated", g.correlated);
  rd(j, "eig_lo", g.eig_lo);
  rd(j, "eig_hi", g.eig_hi);
  rd(j, "noise_std", g.noise_std);
  rd(j, "cov_seed", g.cov_seed);
}

void bnn_from(const json& j, BnnTaskSpec& b) {
  rd(j, "dataset", b.dataset);
  rd(j, "test_fraction", b.test_fraction);
  rd(j, "split_seed", b.split_seed);
  rd(j, "hidden", b.hidden);
  rd(j, "activation", b.activation);
  rd(j, "prior_precision", b.prior_precision);
  rd(j, "batch_size", b.batch_size);
  rd(j, "standardize", b.standardize);
}

void task_from(const json& j, TaskSpec& t) {
  rd(j, "kind", t.kind);
  if (j.contains("gaussian")) gaussian_from(j.at("gaussian"), t.gaussian);
  if (j.contains("bnn")) bnn_from(j.at("bnn"), t.bnn);
  rd(j, "init_lo", t.init_lo);
  rd(j, "init_hi", t.init_hi);
}

void sampler_from(const json& j, SamplerConfig& s) {
  rd(j, "kind", s.kind);
  rd(j, "label", s.label);
  rd(j, "eta", s.eta);
  rd(j, "per_batch_lr", s.per_batch_lr);
  rd(j, "momentum_decay", s.momentum_decay);
  rd(j, "gamma", s.gamma);
  rd(j, "noise", s.noise);
  rd(j, "fd_floor", s.fd_floor);
  rd(j, "friction", s.friction);
  rd(j, "rho", s.rho);
  rd(j, "kappa", s.kappa);
  rd(j, "checkpoint", s.checkpoint);
  rd(j, "clamp", s.clamp);
  rd(j, "clamp_lo", s.clamp_lo);
  rd(j, "clamp_hi", s.clamp_hi);
  rd(j, "recalibrate", s.recalibrate);
  rd(j, "pilot_steps", s.pilot_steps);
}

void nets_from(const json& j, NetsOptions& n) {
  rd(j, "hidden_q", n.hidden_q);
  rd(j, "hidden_d", n.hidden_d);
  rd(j, "init_half_width", n.init_half_width);
  rd(j, "alpha", n.alpha);
  rd(j, "beta", n.beta);
  rd(j, "c", n.c);
  rd(j, "d_scale", n.d_scale);
}

void train_from(const json& j, TrainConfig& t) {
  rd(j, "chains", t.chains);
  rd(j, "unroll", t.unroll);
  rd(j, "truncation", t.truncation);
  rd(j, "cross_stride", t.cross_stride);
  rd(j, "burn_in", t.burn_in);
  rd(j, "in_chain_subsample", t.in_chain_subsample);
  rd(j, "thinning", t.thinning);
  rd(j, "ridge", t.ridge);
  rd(j, "bandwidth_multiplier", t.bandwidth_multiplier);
  rd(j, "learning_rate", t.learning_rate);
  rd(j, "epochs", t.epochs);
  rd(j, "sub_epochs", t.sub_epochs);
  rd(j, "weight_cross", t.weight_cross);
  rd(j, "weight_in", t.weight_in);
  rd(j, "pilot_steps", t.pilot_steps);
  rd(j, "max_consecutive_divergences", t.max_consecutive_divergences);
  rd(j, "grad_clip", t.grad_clip);
}

void eval_from(const json& j, EvalSpec& e) {
  rd(j, "chains", e.chains);
  rd(j, "steps", e.steps);
  rd(j, "burn_in", e.burn_in);
  rd(j, "thin", e.thin);
  rd(j, "curve_every", e.curve_every);
  rd(j, "metrics", e.metrics);
  rd(j, "seeds", e.seeds);
  rd(j, "format", e.format);
}

// Rejects keys absent from the reference document.
void check_keys(const json& doc, const json& ref, const std::string& path) {
  if (!doc.is_object()) return;
  for (const auto& [key, value] : doc.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!ref.is_object() || !ref.contains(key)) throw ConfigError("unknown config key '" + here + "'");
    const json& r = ref.at(key);
    if (key == "compare" && path.empty()) {
      if (!value.is_array()) throw ConfigError("'compare' must be a list of sampler specs");
      for (const auto& item : value) check_keys(item, sampler_json(SamplerConfig{}), here + "[]");
    } else if (r.is_object()) {
      check_keys(value, r, here);
    }
  }
}

void validate(const RunConfig& c) {
  for (const TaskSpec* t : {&c.train_task, &c.test_task}) {
    if (t->kind != "gaussian" && t->kind != "bnn")
      throw ConfigError("task kind must be 'gaussian' or 'bnn', got '" + t->kind + "'");
  }
  if (c.eval.chains < 1) throw ConfigError("eval.chains must be >= 1");
  if (c.eval.thin < 1) throw ConfigError("eval.thin must be >= 1");
  if (c.eval.curve_every < 1) throw ConfigError("eval.curve_every must be >= 1");
  if (c.eval.format != "csv" && c.eval.format != "binary")
    throw ConfigError("eval.format must be 'csv' or 'binary'");
  for (const auto& m : c.eval.metrics)
    if (m != "kl" && m != "ess" && m != "nll")
      throw ConfigError("unknown metric '" + m + "' (expected kl, ess or nll)");
  for (const SamplerConfig* s : {&c.sampler, &c.train_sampler}) {
    parse_gamma_mode(s->gamma);
    if (s == &c.sampler) parse_sampler_kind(s->kind);
  }
  for (const auto& s : c.compare) {
    parse_sampler_kind(s.kind);
    parse_gamma_mode(s.gamma);
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  json cmp = json::array();
  for (const auto& s : c.compare) cmp.push_back(sampler_json(s));
  return {{"preset", c.preset},
          {"train_task", task_json(c.train_task)},
          {"test_task", task_json(c.test_task)},
          {"nets", nets_json(c.nets)},
          {"train", train_json(c.train)},
          {"train_sampler", sampler_json(c.train_sampler)},
          {"sampler", sampler_json(c.sampler)},
          {"compare", cmp},
          {"eval", eval_json(c.eval)},
          {"seed", c.seed},
          {"workers", c.workers},
          {"out", c.out}};
}

std::vector<std::string> preset_names() { return {"toy-gaussian", "mlp-nt"}; }

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name.empty()) return c;
  if (name == "toy-gaussian") {
    c.train_task.kind = "gaussian";
    c.train_task.gaussian = {10, 3.0, false, 0.2, 2.0, 1.0, 11};
    c.test_task.kind = "gaussian";
    c.test_task.gaussian = {20, 3.0, true, 0.2, 2.0, 1.0, 12};
    c.nets.hidden_q = 40;
    c.nets.hidden_d = 40;
    c.nets.alpha = 0.1;
    c.nets.beta = 1.0;
    c.nets.c = 0.2;
    c.nets.d_scale = 1.0;
    c.train = TrainConfig{};
    c.train.chains = 50;
    c.train.epochs = 100;
    c.train.sub_epochs = 4;
    c.train_sampler.kind = "nnsghmc";
    c.train_sampler.eta = 0.01;
    c.sampler.kind = "nnsghmc";
    c.sampler.eta = 0.025;
    c.sampler.clamp = true;
    SamplerConfig sg;
    sg.kind = "sghmc";
    sg.eta = 0.025;
    sg.friction = 1.0;
    c.compare = {c.sampler, sg};
    c.eval = EvalSpec{};
    return c;
  }
  if (name == "mlp-nt") {
    c.train_task.kind = "bnn";
    c.train_task.bnn.hidden = {20};
    c.test_task.kind = "bnn";
    c.test_task.bnn.hidden = {40, 40};
    c.nets.hidden_q = 10;
    c.nets.hidden_d = 10;
    c.nets.beta = 1.0;
    c.nets.c = 0.01;
    c.nets.d_scale = 50.0;
    c.train.chains = 10;
    c.train.epochs = 10;
    c.train.sub_epochs = 7;
    c.train_sampler.kind = "nnsghmc";
    c.train_sampler.per_batch_lr = 0.007;
    c.train_sampler.momentum_decay = 0.01;
    c.sampler.kind = "nnsghmc";
    c.sampler.per_batch_lr = 0.018;
    c.sampler.momentum_decay = 0.01;
    SamplerConfig sg;
    sg.kind = "sghmc";
    sg.per_batch_lr = 0.01;
    sg.momentum_decay = 0.01;
    SamplerConfig sgld;
    sgld.kind = "sgld";
    sgld.per_batch_lr = 0.2;
    SamplerConfig psgld;
    psgld.kind = "psgld";
    psgld.per_batch_lr = 1.4e-3;
    c.compare = {c.sampler, sg, sgld, psgld};
    c.eval.chains = 5;
    c.eval.steps = 2000;
    c.eval.burn_in = 200;
    c.eval.thin = 10;
    c.eval.curve_every = 100;
    c.eval.metrics = {"nll"};
    c.eval.seeds = 5;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

RunConfig run_config_from_json(const json& doc, const std::string& base_preset) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  std::string preset = base_preset;
  if (doc.contains("preset")) {
    if (!doc.at("preset").is_string()) throw ConfigError("'preset' must be a string");
    const std::string p = doc.at("preset").get<std::string>();
    if (!p.empty()) preset = p;
  }
  const RunConfig base = preset_config(preset);
  check_keys(doc, to_json(base), "");
  RunConfig c = base;
  try {
    if (doc.contains("train_task")) task_from(doc.at("train_task"), c.train_task);
    if (doc.contains("test_task")) task_from(doc.at("test_task"), c.test_task);
    if (doc.contains("nets")) nets_from(doc.at("nets"), c.nets);
    if (doc.contains("train")) train_from(doc.at("train"), c.train);
    if (doc.contains("train_sampler")) sampler_from(doc.at("train_sampler"), c.train_sampler);
    if (doc.contains("sampler")) sampler_from(doc.at("sampler"), c.sampler);
    if (doc.contains("compare")) {
      c.compare.clear();
      for (const auto& item : doc.at("compare")) {
        SamplerConfig s;
        sampler_from(item, s);
        c.compare.push_back(s);
      }
    }
    if (doc.contains("eval")) eval_from(doc.at("eval"), c.eval);
    rd(doc, "seed", c.seed);
    rd(doc, "workers", c.workers);
    rd(doc, "out", c.out);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  c.preset = preset;
  validate(c);
  return c;
}

RunConfig load_run_config(const std::string& path, const std::string& base_preset) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(doc, base_preset);
}

std::string config_hash(const RunConfig& cfg) {
  // Output location and worker count do not affect results.
  json doc = to_json(cfg);
  doc.erase("out");
  doc.erase("workers");
  const std::string s = doc.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Tasks

Task build_task(const TaskSpec& spec) {
  Task task;
  task.spec = spec;
  if (spec.kind == "gaussian") {
    const auto& g = spec.gaussian;
    if (g.dim < 1) throw ConfigError("gaussian.dim must be >= 1");
    if (!(g.eig_lo > 0.0) || !(g.eig_hi >= g.eig_lo))
      throw ConfigError("gaussian eigenvalue range must satisfy 0 < eig_lo <= eig_hi");
    if (g.noise_std < 0.0) throw ConfigError("gaussian.noise_std must be >= 0");
    Rng rng(g.cov_seed, 0);
    task.cov = random_covariance(g.dim, g.correlated, g.eig_lo, g.eig_hi, rng);
    task.mean = Vec::Constant(static_cast<Eigen::Index>(g.dim), g.mean);
    task.has_truth = true;
    task.model = std::make_shared<GaussianTarget>(
        GaussianTarget::from_covariance(task.mean, task.cov, g.noise_std));
    return task;
  }
  if (spec.kind == "bnn") {
    const auto& b = spec.bnn;
    Dataset all = load_dataset(b.dataset);
    auto [train, test] = split_dataset(all, b.test_fraction, b.split_seed);
    if (b.standardize) {
      const Standardizer st = Standardizer::fit(train);
      st.apply(train);
      st.apply(test);
    }
    std::vector<std::size_t> layers{train.num_features()};
    layers.insert(layers.end(), b.hidden.begin(), b.hidden.end());
    layers.push_back(static_cast<std::size_t>(all.num_classes()));
    auto train_ptr = std::make_shared<const Dataset>(std::move(train));
    auto bnn = std::make_shared<BnnTarget>(train_ptr, layers, parse_activation(b.activation),
                                           b.prior_precision, b.batch_size, b.split_seed);
    task.bnn = bnn;
    task.model = bnn;
    task.test_data = std::make_shared<const Dataset>(std::move(test));
    return task;
  }
  throw ConfigError("unknown task kind '" + spec.kind + "'");
}

namespace {

// A per-batch learning rate lr acts on the mean mini-batch gradient. For the
// momentum samplers the position moves by eta^2 times the full-data force, so
// eta = sqrt(lr / N); first-order samplers take eta = lr / N.
double resolve_eta(const SamplerConfig& sc, const EnergyModel& model) {
  const double n = static_cast<double>(model.num_observations());
  const SamplerKind kind = parse_sampler_kind(sc.kind);
  const bool first_order = kind == SamplerKind::kSgld || kind == SamplerKind::kPsgld;
  double eta = sc.eta;
  if (sc.per_batch_lr > 0.0) eta = first_order ? sc.per_batch_lr / n : std::sqrt(sc.per_batch_lr / n);
  if (!(eta > 0.0)) throw ConfigError("sampler step size must be positive");
  return eta;
}

StepConfig step_config(const SamplerConfig& sc, double eta) {
  StepConfig s;
  s.eta = eta;
  s.gamma = parse_gamma_mode(sc.gamma);
  s.noise_on = sc.noise;
  s.fd_floor = sc.fd_floor;
  return s;
}

}  // namespace

TrainConfig train_config_for(const RunConfig& cfg, const Task& task) {
  TrainConfig t = cfg.train;
  t.init_lo = task.spec.init_lo;
  t.init_hi = task.spec.init_hi;
  SamplerConfig ts = cfg.train_sampler;
  ts.kind = "nnsghmc";
  t.step = step_config(ts, resolve_eta(ts, *task.model));
  t.workers = cfg.resolved_workers();
  return t;
}

TrainResult run_meta_train(const RunConfig& cfg, const TrainCallback& on_update) {
  const Task task = build_task(cfg.train_task);
  const TrainConfig tc = train_config_for(cfg, task);
  NetsOptions opts = cfg.nets;
  if (cfg.train_sampler.momentum_decay > 0.0) opts.alpha = cfg.train_sampler.momentum_decay / tc.step.eta;
  return meta_train(*task.model, tc, opts, cfg.seed, on_update);
}

SamplerSpec resolve_sampler(const SamplerConfig& sc, const Task& task, std::uint64_t seed,
                            std::size_t workers, const MetaNets* nets) {
  (void)workers;
  const EnergyModel& model = *task.model;
  const double eta = resolve_eta(sc, model);
  SamplerSpec spec;
  spec.kind = parse_sampler_kind(sc.kind);
  spec.step = step_config(sc, eta);
  spec.hyper.eta = eta;
  spec.hyper.friction = sc.momentum_decay > 0.0 ? sc.momentum_decay / eta : sc.friction;
  spec.hyper.rho = sc.rho;
  spec.hyper.kappa = sc.kappa;
  spec.hyper.noise_on = sc.noise;
  if (spec.kind != SamplerKind::kNnsghmc) return spec;

  MetaNets n;
  if (nets) {
    n = *nets;
  } else {
    if (sc.checkpoint.empty()) throw ConfigError("nnsghmc sampler needs a checkpoint path");
    n = load_checkpoint(sc.checkpoint);
  }
  n.clamp_enabled = sc.clamp;
  n.q_clamp = {sc.clamp_lo, sc.clamp_hi};
  if (sc.momentum_decay > 0.0) n.alpha = sc.momentum_decay / eta;
  PreprocessStats stats = n.stats;
  if (!(stats.dim_train > 0.0)) stats.dim_train = static_cast<double>(model.dim());
  stats.dim_test = static_cast<double>(model.dim());
  stats.n_observations = static_cast<double>(model.num_observations());
  stats.batch_size = static_cast<double>(model.batch_size());
  if (sc.recalibrate) {
    NetsOptions pilot_opts;
    pilot_opts.hidden_q = n.q_net.hidden();
    pilot_opts.hidden_d = n.d_net.hidden();
    pilot_opts.alpha = n.alpha;
    pilot_opts.beta = n.beta;
    pilot_opts.c = n.c;
    pilot_opts.d_scale = n.d_scale;
    Rng rng(seed, 0xca1);
    MetaNets pilot = make_meta_nets(pilot_opts, rng);
    TrainConfig init;
    init.init_lo = task.spec.init_lo;
    init.init_hi = task.spec.init_hi;
    std::vector<Vec> thetas;
    for (int k = 0; k < 10; ++k) thetas.push_back(initial_state(model, init, rng).theta);
    stats = calibrate_preprocess(model, pilot, thetas, sc.pilot_steps, spec.step, stats, rng);
  }
  n.stats = stats;
  n.validate();
  spec.nets = std::make_shared<const MetaNets>(std::move(n));
  return spec;
}

// ---------------------------------------------------------------------------
// Running

namespace {

struct ChainBuffers {
  Vec sum;
  Mat outer;
  double count = 0.0;
  std::vector<double> trace;  // post-burn-in states, row-major (steps x D)
  std::vector<Vec> kept;
  std::vector<std::uint64_t> kept_steps;
  RowMatrix predictive;
  double predictive_count = 0.0;
};

bool has_metric(const EvalSpec& e, const std::string& m) {
  return std::find(e.metrics.begin(), e.metrics.end(), m) != e.metrics.end();
}

}  // namespace

RunResult run_sampler(const Task& task, const SamplerSpec& spec, const EvalSpec& eval,
                      std::uint64_t seed, std::size_t workers) {
  const EnergyModel& model = *task.model;
  const bool want_kl = has_metric(eval, "kl");
  const bool want_ess = has_metric(eval, "ess");
  const bool want_nll = has_metric(eval, "nll");
  if (want_kl && !task.has_truth) throw ConfigError("metric 'kl' needs a Gaussian target");
  if (want_nll && !task.bnn) throw ConfigError("metric 'nll' needs a classifier target");
  if (eval.chains < 1 || eval.thin < 1 || eval.curve_every < 1)
    throw ConfigError("eval chains, thin and curve_every must be >= 1");
  if (eval.burn_in >= eval.steps) throw ConfigError("eval.burn_in must be smaller than eval.steps");

  const std::size_t kc = eval.chains;
  const auto d = static_cast<Eigen::Index>(model.dim());
  TrainConfig init;
  init.init_lo = task.spec.init_lo;
  init.init_hi = task.spec.init_hi;
  Rng init_rng(seed, 0x5747);
  std::vector<SamplerState> states;
  std::vector<Rng> rngs;
  std::vector<ChainBuffers> buf(kc);
  for (std::size_t k = 0; k < kc; ++k) {
    states.push_back(initial_state(model, init, init_rng));
    rngs.emplace_back(seed, 100 + k);
    if (want_kl) {
      buf[k].sum = Vec::Zero(d);
      buf[k].outer = Mat::Zero(d, d);
    }
    if (want_nll)
      buf[k].predictive = RowMatrix::Zero(task.test_data->features.rows(),
                                          static_cast<Eigen::Index>(task.bnn->layer_sizes().back()));
  }

  RunResult result;
  std::size_t done = 0;
  while (done < eval.steps) {
    const std::size_t block = std::min(eval.curve_every, eval.steps - done);
    parallel_for(kc, workers, [&](std::size_t k) {
      SamplerState& s = states[k];
      ChainBuffers& b = buf[k];
      for (std::size_t i = 0; i < block; ++i) {
        advance(spec, s, model, rngs[k]);
        const std::size_t step = s.step;
        if (want_kl) {
          b.sum += s.theta;
          b.outer.selfadjointView<Eigen::Lower>().rankUpdate(s.theta);
          b.count += 1.0;
        }
        if (step > eval.burn_in) {
          if (want_ess) b.trace.insert(b.trace.end(), s.theta.begin(), s.theta.end());
          if ((step - eval.burn_in) % eval.thin == 0) {
            b.kept.push_back(s.theta);
            b.kept_steps.push_back(step);
            if (want_nll) {
              b.predictive += task.bnn->predict_proba(s.theta, task.test_data->features);
              b.predictive_count += 1.0;
            }
          }
        }
      }
    });
    done += block;

    if (want_kl) {
      Vec sum = Vec::Zero(d);
      Mat outer = Mat::Zero(d, d);
      double n = 0.0;
      for (const auto& b : buf) {
        sum += b.sum;
        outer += b.outer;
        n += b.count;
      }
      if (n > static_cast<double>(d) + 1.0) {
        const Vec mu = sum / n;
        Mat cov = outer.selfadjointView<Eigen::Lower>();
        cov = (cov - n * mu * mu.transpose()) / (n - 1.0);
        try {
          result.curve.push_back({done, "kl", gaussian_kl(mu, cov, task.mean, task.cov)});
        } catch (const NumericError&) {
          // rank-deficient pooled covariance this early; no curve point
        }
      }
    }
    if (want_nll) {
      RowMatrix avg = RowMatrix::Zero(buf[0].predictive.rows(), buf[0].predictive.cols());
      double n = 0.0;
      for (const auto& b : buf) {
        avg += b.predictive;
        n += b.predictive_count;
      }
      if (n > 0.0) {
        avg /= n;
        const ClassifyResult r = score_predictive(avg, task.test_data->labels);
        result.curve.push_back({done, "test_error", r.error_rate});
        result.curve.push_back({done, "test_nll", r.mean_nll});
      }
    }
  }

  for (const auto& p : result.curve) result.final_metrics[p.metric] = p.value;
  if (want_ess) {
    double total = 0.0;
    std::size_t counted = 0;
    for (const auto& b : buf) {
      const auto rows = static_cast<Eigen::Index>(b.trace.size() / static_cast<std::size_t>(d));
      if (rows < 10) continue;
      const Mat trace = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                        Eigen::RowMajor>>(b.trace.data(), rows, d);
      total += ess(trace);
      ++counted;
    }
    if (counted == 0) throw ConfigError("ESS needs at least 10 post-burn-in steps per chain");
    result.final_metrics["ess"] = total / static_cast<double>(counted);
  }

  std::size_t rows = 0;
  for (const auto& b : buf) rows += b.kept.size();
  SampleSet& ss = result.samples;
  ss.draws.resize(static_cast<Eigen::Index>(rows), d);
  std::size_t r = 0;
  for (std::size_t k = 0; k < kc; ++k) {
    for (std::size_t i = 0; i < buf[k].kept.size(); ++i, ++r) {
      ss.draws.row(static_cast<Eigen::Index>(r)) = buf[k].kept[i].transpose();
      ss.chain.push_back(k);
      ss.step.push_back(buf[k].kept_steps[i]);
    }
  }
  return result;
}

}  // namespace metasg
