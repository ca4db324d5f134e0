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

#include "metasg/diagnostics.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <unsupported/Eigen/FFT>

#include "metasg/error.hpp"

namespace metasg {

void SampleSet::validate() const {
  if (draws.rows() < 1) throw ContractError("sample set is empty");
  if (chain.size() != size() || step.size() != size())
    throw ContractError("chain/step columns must match the number of draws");
  if (!draws.allFinite()) throw ContractError("sample set contains non-finite draws");
}

std::vector<std::uint64_t> SampleSet::chain_ids() const {
  std::set<std::uint64_t> ids(chain.begin(), chain.end());
  return {ids.begin(), ids.end()};
}

Mat SampleSet::chain_draws(std::uint64_t chain_id) const {
  std::vector<std::pair<std::uint64_t, Eigen::Index>> rows;
  for (std::size_t i = 0; i < chain.size(); ++i)
    if (chain[i] == chain_id) rows.emplace_back(step[i], static_cast<Eigen::Index>(i));
  std::stable_sort(rows.begin(), rows.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  Mat out(static_cast<Eigen::Index>(rows.size()), draws.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    out.row(static_cast<Eigen::Index>(r)) = draws.row(rows[r].second);
  return out;
}

// ---------------------------------------------------------------------------
// KL

namespace {

Eigen::LLT<Mat> spd_factor(const Mat& m, const char* what, bool contract) {
  Eigen::LLT<Mat> llt(m);
  const bool symmetric = (m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * (1.0 + m.cwiseAbs().maxCoeff());
  if (!symmetric || llt.info() != Eigen::Success) {
    const std::string msg = std::string(what) + " is not symmetric positive definite";
    if (contract) throw ContractError(msg);
    throw NumericError(msg);
  }
  return llt;
}

double log_det(const Eigen::LLT<Mat>& llt) {
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

}  // namespace

double gaussian_kl(const Vec& m0, const Mat& s0, const Vec& m1, const Mat& s1) {
  const auto d = m0.size();
  if (m1.size() != d || s0.rows() != d || s0.cols() != d || s1.rows() != d || s1.cols() != d)
    throw ContractError("gaussian_kl dimension mismatch");
  const auto l0 = spd_factor(s0, "first covariance", false);
  const auto l1 = spd_factor(s1, "second covariance", true);
  const Vec diff = m1 - m0;
  const double trace = l1.solve(s0).trace();
  const double maha = diff.dot(l1.solve(diff));
  return 0.5 * (trace + maha - static_cast<double>(d) + log_det(l1) - log_det(l0));
}

double fit_gaussian_kl(const Mat& draws, const Vec& mean, const Mat& cov, KlDirection direction) {
  const auto s = draws.rows();
  const auto d = draws.cols();
  if (mean.size() != d || cov.rows() != d || cov.cols() != d)
    throw ContractError("ground-truth parameters do not match the sample dimension");
  spd_factor(cov, "ground-truth covariance", true);
  if (s <= d) throw ContractError("need more draws than dimensions for a full-rank covariance");
  if (!draws.allFinite()) throw ContractError("draws must be finite");
  const Vec mu = draws.colwise().mean().transpose();
  const Mat centered = draws.rowwise() - mu.transpose();
  const Mat sigma = centered.transpose() * centered / static_cast<double>(s - 1);
  const Vec eig = Eigen::SelfAdjointEigenSolver<Mat>(sigma, Eigen::EigenvaluesOnly).eigenvalues();
  if (!(eig.minCoeff() > 1e-12 * eig.cwiseAbs().maxCoeff()))
    throw NumericError("empirical covariance is rank deficient");
  if (direction == KlDirection::kEmpiricalToTruth) return gaussian_kl(mu, sigma, mean, cov);
  return gaussian_kl(mean, cov, mu, sigma);
}

double fit_gaussian_kl(const SampleSet& samples, const Vec& mean, const Mat& cov,
                       KlDirection direction) {
  samples.validate();
  return fit_gaussian_kl(samples.draws, mean, cov, direction);
}

// ---------------------------------------------------------------------------
// ESS

Vec autocorrelation(const Vec& series, std::size_t max_lag) {
  const auto n = series.size();
  max_lag = std::min<std::size_t>(max_lag, static_cast<std::size_t>(std::max<Eigen::Index>(n - 1, 0)));
  Vec out = Vec::Zero(static_cast<Eigen::Index>(max_lag + 1));
  if (n == 0) return out;
  const Vec x = series.array() - series.mean();
  const double var = x.squaredNorm();
  if (!(var > 0.0)) return out;

  std::size_t m = 1;
  while (m < static_cast<std::size_t>(2 * n)) m <<= 1;
  std::vector<double> padded(m, 0.0);
  std::copy(x.data(), x.data() + n, padded.begin());
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> spec;
  fft.fwd(spec, padded);
  for (auto& c : spec) c = std::complex<double>(std::norm(c), 0.0);
  std::vector<double> acov;
  fft.inv(acov, spec);
  for (std::size_t k = 0; k <= max_lag; ++k) out[static_cast<Eigen::Index>(k)] = acov[k] / acov[0];
  return out;
}

double ess(const Vec& series) {
  const auto n = series.size();
  if (n < 10) throw ContractError("ESS needs a series of length >= 10");
  if (!series.allFinite()) throw ContractError("ESS series must be finite");
  const Vec rho = autocorrelation(series, static_cast<std::size_t>(n - 1));
  if (rho[0] == 0.0) return 1.0;
  double sum = 0.0;
  for (Eigen::Index k = 1; k < rho.size(); ++k) {
    if (!(rho[k] > 0.0)) break;
    sum += rho[k];
  }
  const double nd = static_cast<double>(n);
  return std::clamp(nd / (1.0 + 2.0 * sum), 1.0, nd);
}

double ess(const Mat& series) {
  if (series.cols() < 1) throw ContractError("ESS needs at least one coordinate");
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < series.cols(); ++j) best = std::min(best, ess(Vec(series.col(j))));
  return best;
}

// ---------------------------------------------------------------------------
// Classification

ClassifyResult score_predictive(const RowMatrix& predictive, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(predictive.rows()) != labels.size())
    throw ContractError("predictive rows and labels differ in length");
  ClassifyResult r;
  r.predictive = predictive;
  std::size_t wrong = 0;
  for (Eigen::Index i = 0; i < predictive.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= predictive.cols()) throw ContractError("label outside the class range");
    Eigen::Index arg = 0;
    predictive.row(i).maxCoeff(&arg);
    if (arg != y) ++wrong;
    r.nll -= std::log(std::max(predictive(i, y), std::numeric_limits<double>::min()));
  }
  const double n = static_cast<double>(std::max<Eigen::Index>(predictive.rows(), 1));
  r.error_rate = static_cast<double>(wrong) / n;
  r.mean_nll = r.nll / n;
  return r;
}

ClassifyResult classify_eval(const Mat& draws, const BnnTarget& model, const Dataset& eval) {
  if (draws.rows() < 1) throw ContractError("classify_eval needs at least one draw");
  if (static_cast<std::size_t>(draws.cols()) != model.dim())
    throw ContractError("draws do not match the classifier architecture");
  if (eval.num_features() != model.layer_sizes().front())
    throw ContractError("evaluation features do not match the classifier input width");
  RowMatrix avg = RowMatrix::Zero(eval.features.rows(),
                                  static_cast<Eigen::Index>(model.layer_sizes().back()));
  for (Eigen::Index s = 0; s < draws.rows(); ++s) avg += model.predict_proba(draws.row(s).transpose(), eval.features);
  avg /= static_cast<double>(draws.rows());
  return score_predictive(avg, eval.labels);
}

ClassifyResult classify_eval(const SampleSet& samples, const BnnTarget& model,
                             const Dataset& eval) {
  samples.validate();
  return classify_eval(samples.draws, model, eval);
}

void append_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw ConfigError("cannot append to metrics file '" + path + "'");
  if (fresh) out << "metric,value,config_hash\n";
  out << std::setprecision(12);
  for (const auto& r : rows) out << r.metric << ',' << r.value << ',' << r.config_hash << '\n';
}

// ---------------------------------------------------------------------------
// Sample files

namespace {

constexpr char kMagic[8] = {'M', 'S', 'G', 'S', 'M', 'P', 'L', '1'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw IngestionError("truncated sample file '" + path + "'");
  return to_little(v);
}

std::string meta_path(const std::string& path) { return path + ".meta.json"; }

void write_meta(const SampleSet& s, const std::string& path) {
  std::ofstream out(meta_path(path));
  if (!out) throw ConfigError("cannot write sample metadata for '" + path + "'");
  out << s.metadata.dump(2) << '\n';
}

}  // namespace

void write_samples_csv(const SampleSet& s, const std::string& path) {
  s.validate();
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write samples to '" + path + "'");
  out << "chain,step";
  for (std::size_t j = 0; j < s.dim(); ++j) out << ",theta_" << j;
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < s.size(); ++i) {
    out << s.chain[i] << ',' << s.step[i];
    for (Eigen::Index j = 0; j < s.draws.cols(); ++j) out << ',' << s.draws(static_cast<Eigen::Index>(i), j);
    out << '\n';
  }
  write_meta(s, path);
}

void write_samples_binary(const SampleSet& s, const std::string& path) {
  s.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write samples to '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, s.size());
  put<std::uint64_t>(out, s.dim() + 2);
  for (std::size_t i = 0; i < s.size(); ++i) {
    put<double>(out, static_cast<double>(s.chain[i]));
    put<double>(out, static_cast<double>(s.step[i]));
    for (Eigen::Index j = 0; j < s.draws.cols(); ++j) put<double>(out, s.draws(static_cast<Eigen::Index>(i), j));
  }
  write_meta(s, path);
}

SampleSet read_samples(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open sample file '" + path + "'");
  char head[8] = {};
  in.read(head, sizeof(head));
  SampleSet s;
  if (in.gcount() == 8 && std::memcmp(head, kMagic, 8) == 0) {
    const auto rows = get<std::uint64_t>(in, path);
    const auto cols = get<std::uint64_t>(in, path);
    if (cols < 3) throw IngestionError("sample file '" + path + "' has no theta columns");
    s.draws.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols - 2));
    for (std::uint64_t i = 0; i < rows; ++i) {
      s.chain.push_back(static_cast<std::uint64_t>(get<double>(in, path)));
      s.step.push_back(static_cast<std::uint64_t>(get<double>(in, path)));
      for (std::uint64_t j = 0; j + 2 < cols; ++j)
        s.draws(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = get<double>(in, path);
    }
  } else {
    in.clear();
    in.seekg(0);
    std::string line;
    if (!std::getline(in, line)) throw IngestionError("sample file '" + path + "' is empty");
    const auto cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (line.rfind("chain,step", 0) != 0 || cols < 3)
      throw IngestionError("sample file '" + path + "' has an unexpected header");
    std::vector<double> values;
    std::size_t rows = 0, lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string cell;
      std::size_t c = 0;
      while (std::getline(ss, cell, ',')) {
        try {
          std::size_t used = 0;
          const double v = std::stod(cell, &used);
          if (used != cell.size()) throw std::invalid_argument(cell);
          if (c == 0) s.chain.push_back(static_cast<std::uint64_t>(v));
          else if (c == 1) s.step.push_back(static_cast<std::uint64_t>(v));
          else values.push_back(v);
        } catch (const std::exception&) {
          throw IngestionError("malformed value '" + cell + "' at line " + std::to_string(lineno) +
                               " of '" + path + "'");
        }
        ++c;
      }
      if (c != cols)
        throw IngestionError("line " + std::to_string(lineno) + " of '" + path + "' has " +
                             std::to_string(c) + " columns, expected " + std::to_string(cols));
      ++rows;
    }
    s.draws = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols - 2));
  }
  std::ifstream meta(meta_path(path));
  if (meta) {
    try {
      s.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError("malformed sample metadata for '" + path + "': " + e.what());
    }
  }
  return s;
}

}  // namespace metasg
