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

#ifndef METASG_DIAGNOSTICS_HPP
#define METASG_DIAGNOSTICS_HPP

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "metasg/dataset.hpp"
#include "metasg/energy.hpp"

namespace metasg {

/// Retained draws (one row each) with their chain ids and step indices.
struct SampleSet {
  Mat draws;
  std::vector<std::uint64_t> chain;
  std::vector<std::uint64_t> step;
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t size() const { return static_cast<std::size_t>(draws.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(draws.cols()); }
  void validate() const;
  /// Rows belonging to `chain_id`, in step order.
  Mat chain_draws(std::uint64_t chain_id) const;
  std::vector<std::uint64_t> chain_ids() const;
};

enum class KlDirection { kEmpiricalToTruth, kTruthToEmpirical };

/// KL between the moment-matched Gaussian of the draws and N(mean, cov);
/// empirical-to-truth by default.
double fit_gaussian_kl(const Mat& draws, const Vec& mean, const Mat& cov,
                       KlDirection direction = KlDirection::kEmpiricalToTruth);
double fit_gaussian_kl(const SampleSet& samples, const Vec& mean, const Mat& cov,
                       KlDirection direction = KlDirection::kEmpiricalToTruth);

/// Closed-form KL(N(m0, s0) || N(m1, s1)).
double gaussian_kl(const Vec& m0, const Mat& s0, const Vec& m1, const Mat& s1);

/// Sample autocorrelations rho_0..rho_{max_lag} (FFT based).
Vec autocorrelation(const Vec& series, std::size_t max_lag);

/// Effective sample size N / (1 + 2 sum rho_k), summing lags until the first
/// non-positive autocorrelation; clamped to [1, N]. Constant series give 1.
double ess(const Vec& series);
/// Minimum of the per-column ESS of an N x D series.
double ess(const Mat& series);

struct ClassifyResult {
  double error_rate = 0.0;
  double nll = 0.0;       // summed over the evaluation rows
  double mean_nll = 0.0;  // nll / rows
  RowMatrix predictive;
};

/// Posterior predictive obtained by averaging the per-draw softmax outputs.
ClassifyResult classify_eval(const Mat& draws, const BnnTarget& model, const Dataset& eval);
ClassifyResult classify_eval(const SampleSet& samples, const BnnTarget& model,
                             const Dataset& eval);
/// Error and NLL of an already averaged predictive (rows sum to 1).
ClassifyResult score_predictive(const RowMatrix& predictive, const std::vector<int>& labels);

struct MetricRow {
  std::string metric;
  double value = 0.0;
  std::string config_hash;
};

/// Appends rows to a CSV (metric,value,config_hash), writing the header for a
/// new file.
void append_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);

// Sample files. CSV: header "chain,step,theta_0,...". Binary: the 8-byte
// magic "MSGSMPL1", uint64 rows, uint64 cols (= 2 + D), then rows x cols
// little-endian doubles in row-major order (chain, step, theta...). Metadata
// goes to a JSON sidecar at <path>.meta.json.
void write_samples_csv(const SampleSet& samples, const std::string& path);
void write_samples_binary(const SampleSet& samples, const std::string& path);
/// Reads either format (detected from the magic) plus the sidecar if present.
SampleSet read_samples(const std::string& path);

}  // namespace metasg

#endif  // METASG_DIAGNOSTICS_HPP
