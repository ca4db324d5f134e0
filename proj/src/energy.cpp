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

#include "metasg/energy.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "metasg/error.hpp"

namespace metasg {

namespace {

void check_dim(const EnergyModel& model, const Vec& theta) {
  if (static_cast<std::size_t>(theta.size()) != model.dim()) {
    throw ContractError("theta has length " + std::to_string(theta.size()) + ", model dim is " +
                        std::to_string(model.dim()));
  }
}

}  // namespace

double energy(const EnergyModel& model, const Vec& theta) {
  check_dim(model, theta);
  return model.energy(theta);
}

Vec grad_energy(const EnergyModel& model, const Vec& theta) {
  check_dim(model, theta);
  return model.grad_energy(theta);
}

EnergyEval stochastic_energy_grad(const EnergyModel& model, const Vec& theta,
                                  std::size_t batch_index, Rng& rng,
                                  const EnergyScaling& scaling) {
  check_dim(model, theta);
  const EnergyTerms t = model.stochastic_terms(theta, batch_index, rng);
  const double n = static_cast<double>(model.num_observations());
  const double m = static_cast<double>(model.batch_size());
  const double prior_factor = scaling.ratio() / n;

  EnergyEval out;
  out.energy = (n / m) * t.data_term + t.prior_term;
  out.scaled_energy = t.data_term / m + prior_factor * t.prior_term;
  out.grad = Vec::Zero(theta.size());
  out.scaled_grad = Vec::Zero(theta.size());
  if (t.data_grad.size() > 0) {
    out.grad += (n / m) * t.data_grad;
    out.scaled_grad += t.data_grad / m;
  }
  if (t.prior_grad.size() > 0) {
    out.grad += t.prior_grad;
    out.scaled_grad += prior_factor * t.prior_grad;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian

GaussianTarget::GaussianTarget(Vec mean, Mat precision, double injected_noise_std)
    : mean_(std::move(mean)), precision_(std::move(precision)), noise_std_(injected_noise_std) {
  const auto d = mean_.size();
  if (d == 0) throw ContractError("Gaussian target needs dim >= 1");
  if (precision_.rows() != d || precision_.cols() != d) {
    throw ContractError("precision must be dim x dim");
  }
  if (!(noise_std_ >= 0.0)) throw ContractError("injected_noise_std must be >= 0");
  if ((precision_ - precision_.transpose()).cwiseAbs().maxCoeff() >
      1e-10 * (1.0 + precision_.cwiseAbs().maxCoeff())) {
    throw ContractError("precision must be symmetric");
  }
  Eigen::LLT<Mat> llt(precision_);
  if (llt.info() != Eigen::Success) throw ContractError("precision must be positive definite");
  covariance_ = llt.solve(Mat::Identity(d, d));
  covariance_ = 0.5 * (covariance_ + covariance_.transpose());
}

GaussianTarget GaussianTarget::from_covariance(Vec mean, const Mat& covariance,
                                               double injected_noise_std) {
  Eigen::LLT<Mat> llt(covariance);
  if (llt.info() != Eigen::Success) throw ContractError("covariance must be positive definite");
  Mat precision = llt.solve(Mat::Identity(covariance.rows(), covariance.cols()));
  precision = 0.5 * (precision + precision.transpose());
  GaussianTarget t(std::move(mean), std::move(precision), injected_noise_std);
  t.covariance_ = covariance;
  return t;
}

double GaussianTarget::energy(const Vec& theta) const {
  const Vec r = theta - mean_;
  return 0.5 * r.dot(precision_ * r);
}

Vec GaussianTarget::grad_energy(const Vec& theta) const { return precision_ * (theta - mean_); }

EnergyTerms GaussianTarget::stochastic_terms(const Vec& theta, std::size_t /*batch_index*/,
                                             Rng& rng) const {
  EnergyTerms t;
  const Vec r = theta - mean_;
  t.prior_grad = precision_ * r;
  t.prior_term = 0.5 * r.dot(t.prior_grad);
  if (noise_std_ > 0.0) {
    for (Eigen::Index i = 0; i < t.prior_grad.size(); ++i) {
      t.prior_grad[i] += noise_std_ * rng.normal();
    }
  }
  return t;
}

Mat random_covariance(std::size_t dim, bool correlated, double lo, double hi, Rng& rng) {
  if (!(lo > 0.0 && hi >= lo)) throw ContractError("eigenvalue range must satisfy 0 < lo <= hi");
  const auto d = static_cast<Eigen::Index>(dim);
  Vec eig(d);
  for (Eigen::Index i = 0; i < d; ++i) eig[i] = rng.uniform(lo, hi);
  if (!correlated) return eig.asDiagonal();
  Mat g(d, d);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ();
  // Fix column signs so the rotation is a deterministic function of g.
  const Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < d; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  Mat cov = q * eig.asDiagonal() * q.transpose();
  return 0.5 * (cov + cov.transpose());
}

// ---------------------------------------------------------------------------
// Bayesian classifier

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "sigmoid") return Activation::kSigmoid;
  throw ConfigError("unknown activation '" + name + "' (expected relu or sigmoid)");
}

std::string to_string(Activation a) { return a == Activation::kRelu ? "relu" : "sigmoid"; }

BnnTarget::BnnTarget(std::shared_ptr<const Dataset> data, std::vector<std::size_t> layer_sizes,
                     Activation activation, double prior_precision, std::size_t batch_size,
                     std::uint64_t shuffle_seed)
    : data_(std::move(data)),
      layers_(std::move(layer_sizes)),
      activation_(activation),
      prior_precision_(prior_precision),
      batch_size_(batch_size),
      shuffle_seed_(shuffle_seed),
      dim_(0) {
  if (!data_ || data_->size() == 0) throw ConfigError("classifier target needs a non-empty dataset");
  if (layers_.size() < 2) throw ConfigError("classifier needs at least input and output layers");
  for (auto s : layers_)
    if (s == 0) throw ConfigError("layer sizes must be positive");
  if (layers_.front() != data_->num_features()) {
    throw ConfigError("input layer size " + std::to_string(layers_.front()) +
                      " does not match " + std::to_string(data_->num_features()) + " features");
  }
  if (static_cast<int>(layers_.back()) < data_->num_classes()) {
    throw ConfigError("output layer smaller than the number of classes in the dataset");
  }
  if (!(prior_precision_ > 0.0)) throw ConfigError("prior precision must be positive");
  if (batch_size_ == 0 || batch_size_ > data_->size()) {
    throw ConfigError("minibatch size must be in [1, N]");
  }
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) dim_ += layers_[l + 1] * (layers_[l] + 1);
}

namespace {

struct Layer {
  Eigen::Map<const RowMatrix> w;
  Eigen::Map<const Vec> b;
};

}  // namespace

double BnnTarget::data_energy(const Vec& theta, const std::vector<std::size_t>& rows,
                              Vec* grad) const {
  const std::size_t n_layers = layers_.size() - 1;
  std::vector<Layer> params;
  params.reserve(n_layers);
  std::size_t offset = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto in = static_cast<Eigen::Index>(layers_[l]);
    const auto out = static_cast<Eigen::Index>(layers_[l + 1]);
    params.push_back({Eigen::Map<const RowMatrix>(theta.data() + offset, out, in),
                      Eigen::Map<const Vec>(theta.data() + offset + out * in, out)});
    offset += static_cast<std::size_t>(out * (in + 1));
  }

  Mat x;
  std::vector<int> y;
  if (rows.empty()) {
    x = data_->features;
    y = data_->labels;
  } else {
    x.resize(static_cast<Eigen::Index>(rows.size()), data_->features.cols());
    y.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = data_->features.row(static_cast<Eigen::Index>(rows[i]));
      y.push_back(data_->labels[rows[i]]);
    }
  }

  // Forward pass keeping pre-activations for the reverse sweep.
  std::vector<Mat> acts{x};
  std::vector<Mat> pre;
  for (std::size_t l = 0; l < n_layers; ++l) {
    Mat z = acts.back() * params[l].w.transpose();
    z.rowwise() += params[l].b.transpose();
    pre.push_back(z);
    if (l + 1 < n_layers) {
      if (activation_ == Activation::kRelu) {
        acts.push_back(z.cwiseMax(0.0));
      } else {
        acts.push_back((1.0 / (1.0 + (-z.array()).exp())).matrix());
      }
    }
  }
  Mat& logits = pre.back();
  const Vec row_max = logits.rowwise().maxCoeff();
  Mat probs = (logits.colwise() - row_max).array().exp().matrix();
  const Vec denom = probs.rowwise().sum();
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    total += row_max[i] + std::log(denom[i]) - logits(i, y[static_cast<std::size_t>(i)]);
  }
  if (!grad) return total;

  grad->setZero(static_cast<Eigen::Index>(dim_));
  probs.array().colwise() /= denom.array();
  Mat delta = std::move(probs);
  for (Eigen::Index i = 0; i < delta.rows(); ++i) delta(i, y[static_cast<std::size_t>(i)]) -= 1.0;

  // Parameter offsets per layer, walked in reverse.
  std::vector<std::size_t> offsets(n_layers);
  offset = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    offsets[l] = offset;
    offset += layers_[l + 1] * (layers_[l] + 1);
  }
  for (std::size_t l = n_layers; l-- > 0;) {
    const auto in = static_cast<Eigen::Index>(layers_[l]);
    const auto out = static_cast<Eigen::Index>(layers_[l + 1]);
    Eigen::Map<RowMatrix> gw(grad->data() + offsets[l], out, in);
    Eigen::Map<Vec> gb(grad->data() + offsets[l] + out * in, out);
    gw.noalias() = delta.transpose() * acts[l];
    gb = delta.colwise().sum().transpose();
    if (l == 0) break;
    Mat back = delta * params[l].w;
    if (activation_ == Activation::kRelu) {
      back.array() *= (pre[l - 1].array() > 0.0).cast<double>();
    } else {
      const auto& s = acts[l].array();
      back.array() *= s * (1.0 - s);
    }
    delta = std::move(back);
  }
  return total;
}

double BnnTarget::energy(const Vec& theta) const {
  return data_energy(theta, {}, nullptr) + 0.5 * prior_precision_ * theta.squaredNorm();
}

Vec BnnTarget::grad_energy(const Vec& theta) const {
  Vec g;
  data_energy(theta, {}, &g);
  g += prior_precision_ * theta;
  return g;
}

std::vector<std::size_t> BnnTarget::batch_rows(std::size_t batch_index) const {
  const std::size_t nb = num_batches();
  const std::size_t epoch = batch_index / nb;
  const std::size_t slot = batch_index % nb;
  std::vector<std::size_t> order(data_->size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(shuffle_seed_, 0xba7c0000ULL + epoch);
  std::shuffle(order.begin(), order.end(), rng.engine());
  return {order.begin() + static_cast<std::ptrdiff_t>(slot * batch_size_),
          order.begin() + static_cast<std::ptrdiff_t>((slot + 1) * batch_size_)};
}

EnergyTerms BnnTarget::stochastic_terms(const Vec& theta, std::size_t batch_index,
                                        Rng& /*rng*/) const {
  EnergyTerms t;
  t.data_term = data_energy(theta, batch_rows(batch_index), &t.data_grad);
  t.prior_term = 0.5 * prior_precision_ * theta.squaredNorm();
  t.prior_grad = prior_precision_ * theta;
  return t;
}

RowMatrix BnnTarget::predict_proba(const Vec& theta, const RowMatrix& features) const {
  if (static_cast<std::size_t>(theta.size()) != dim_) {
    throw ContractError("parameter vector does not match the classifier architecture");
  }
  Mat a = features;
  std::size_t offset = 0;
  const std::size_t n_layers = layers_.size() - 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto in = static_cast<Eigen::Index>(layers_[l]);
    const auto out = static_cast<Eigen::Index>(layers_[l + 1]);
    Eigen::Map<const RowMatrix> w(theta.data() + offset, out, in);
    Eigen::Map<const Vec> b(theta.data() + offset + out * in, out);
    offset += static_cast<std::size_t>(out * (in + 1));
    Mat z = a * w.transpose();
    z.rowwise() += b.transpose();
    if (l + 1 < n_layers) {
      a = activation_ == Activation::kRelu ? Mat(z.cwiseMax(0.0))
                                           : Mat((1.0 / (1.0 + (-z.array()).exp())).matrix());
    } else {
      a = std::move(z);
    }
  }
  const Vec row_max = a.rowwise().maxCoeff();
  RowMatrix p = (a.colwise() - row_max).array().exp().matrix();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

Vec BnnTarget::initial_theta(Rng& rng) const {
  Vec theta = Vec::Zero(static_cast<Eigen::Index>(dim_));
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
    const std::size_t in = layers_[l], out = layers_[l + 1];
    const double sd = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::size_t k = 0; k < in * out; ++k) theta[static_cast<Eigen::Index>(offset + k)] = sd * rng.normal();
    offset += out * (in + 1);
  }
  return theta;
}

}  // namespace metasg
