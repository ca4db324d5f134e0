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

#ifndef METASG_ENERGY_HPP
#define METASG_ENERGY_HPP

#include <Eigen/Core>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "metasg/dataset.hpp"
#include "metasg/rng.hpp"

namespace metasg {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Mini-batch decomposition of an energy, U~ = (N/M) * data_term + prior_term.
/// Gradients may be left empty when the corresponding term is absent.
struct EnergyTerms {
  double data_term = 0.0;   // sum over the batch of -log p(y|x, theta)
  double prior_term = 0.0;  // -log p(theta), additive constant dropped
  Vec data_grad;
  Vec prior_grad;
};

/// Ratio of training to test dimensionality used when rescaling the energy
/// fed to the meta networks. Zero means "same task" (ratio 1).
struct EnergyScaling {
  double dim_train = 0.0;
  double dim_test = 0.0;
  double ratio() const {
    return (dim_train > 0.0 && dim_test > 0.0) ? dim_train / dim_test : 1.0;
  }
};

/// Stochastic energy and its rescaled counterpart
///   U_bar = data_term / M + (D_train / (N * D_test)) * prior_term.
struct EnergyEval {
  double energy = 0.0;
  Vec grad;
  double scaled_energy = 0.0;
  Vec scaled_grad;
};

/// Target density exp(-U(theta)). Evaluation is const and thread-safe.
class EnergyModel {
 public:
  virtual ~EnergyModel() = default;

  virtual std::size_t dim() const = 0;
  virtual std::string kind() const = 0;

  /// Exact full-data energy.
  virtual double energy(const Vec& theta) const = 0;
  /// Exact full-data gradient.
  virtual Vec grad_energy(const Vec& theta) const = 0;
  /// Mini-batch terms for the batch selected by `batch_index`; `rng` drives
  /// any injected gradient noise.
  virtual EnergyTerms stochastic_terms(const Vec& theta, std::size_t batch_index,
                                       Rng& rng) const = 0;

  /// N and M of the mini-batch estimator.
  virtual std::size_t num_observations() const { return 1; }
  virtual std::size_t batch_size() const { return 1; }
  virtual std::size_t num_batches() const { return 1; }
};

double energy(const EnergyModel& model, const Vec& theta);
Vec grad_energy(const EnergyModel& model, const Vec& theta);
EnergyEval stochastic_energy_grad(const EnergyModel& model, const Vec& theta,
                                  std::size_t batch_index, Rng& rng,
                                  const EnergyScaling& scaling = {});

/// U(theta) = 1/2 (theta - mean)^T precision (theta - mean); the stochastic
/// version adds N(0, noise_std^2) to every gradient coordinate.
class GaussianTarget final : public EnergyModel {
 public:
  GaussianTarget(Vec mean, Mat precision, double injected_noise_std = 0.0);
  static GaussianTarget from_covariance(Vec mean, const Mat& covariance,
                                        double injected_noise_std = 0.0);

  std::size_t dim() const override { return static_cast<std::size_t>(mean_.size()); }
  std::string kind() const override { return "gaussian"; }
  double energy(const Vec& theta) const override;
  Vec grad_energy(const Vec& theta) const override;
  EnergyTerms stochastic_terms(const Vec& theta, std::size_t batch_index,
                               Rng& rng) const override;

  const Vec& mean() const { return mean_; }
  const Mat& precision() const { return precision_; }
  const Mat& covariance() const { return covariance_; }
  double injected_noise_std() const { return noise_std_; }

 private:
  Vec mean_;
  Mat precision_;
  Mat covariance_;
  double noise_std_;
};

/// Random SPD covariance with eigenvalues drawn uniformly from [lo, hi].
/// When `correlated` is false the matrix is diagonal; otherwise the
/// eigenbasis is a random rotation.
Mat random_covariance(std::size_t dim, bool correlated, double lo, double hi, Rng& rng);

enum class Activation { kRelu, kSigmoid };
Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

/// Fully connected softmax classifier with an isotropic Gaussian prior:
///   U(theta) = sum_n CE(y_n, net_theta(x_n)) + (lambda/2) |theta|^2.
/// Parameters are packed layer by layer as W (out x in, row-major) then b.
class BnnTarget final : public EnergyModel {
 public:
  BnnTarget(std::shared_ptr<const Dataset> data, std::vector<std::size_t> layer_sizes,
            Activation activation, double prior_precision, std::size_t batch_size,
            std::uint64_t shuffle_seed = 0);

  std::size_t dim() const override { return dim_; }
  std::string kind() const override { return "bnn-classifier"; }
  double energy(const Vec& theta) const override;
  Vec grad_energy(const Vec& theta) const override;
  EnergyTerms stochastic_terms(const Vec& theta, std::size_t batch_index,
                               Rng& rng) const override;

  std::size_t num_observations() const override { return data_->size(); }
  std::size_t batch_size() const override { return batch_size_; }
  std::size_t num_batches() const override { return data_->size() / batch_size_; }

  /// Row indices of the mini-batch used at `batch_index`. Batches are
  /// contiguous slices of a per-epoch permutation seeded by (shuffle_seed,
  /// epoch).
  std::vector<std::size_t> batch_rows(std::size_t batch_index) const;

  /// Softmax class probabilities for every row of `features`.
  RowMatrix predict_proba(const Vec& theta, const RowMatrix& features) const;

  /// Summed cross-entropy and its gradient over the given rows (all rows when
  /// `rows` is empty).
  double data_energy(const Vec& theta, const std::vector<std::size_t>& rows,
                     Vec* grad) const;

  const std::vector<std::size_t>& layer_sizes() const { return layers_; }
  Activation activation() const { return activation_; }
  double prior_precision() const { return prior_precision_; }
  const Dataset& dataset() const { return *data_; }

  /// Draws theta with N(0, 1/fan_in) weights and zero biases.
  Vec initial_theta(Rng& rng) const;

 private:
  std::shared_ptr<const Dataset> data_;
  std::vector<std::size_t> layers_;
  Activation activation_;
  double prior_precision_;
  std::size_t batch_size_;
  std::uint64_t shuffle_seed_;
  std::size_t dim_;
};

}  // namespace metasg

#endif  // METASG_ENERGY_HPP
