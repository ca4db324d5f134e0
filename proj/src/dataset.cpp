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

#include "metasg/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "metasg/error.hpp"
#include "metasg/rng.hpp"

namespace metasg {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) {
    auto first = field.find_first_not_of(" \t\r");
    auto last = field.find_last_not_of(" \t\r");
    out.push_back(first == std::string::npos ? std::string{}
                                             : field.substr(first, last - first + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_double(const std::string& s, double& value) {
  if (s.empty()) return false;
  char* end = nullptr;
  value = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(value);
}

bool parse_int(const std::string& s, int& value) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

}  // namespace

int Dataset::num_classes() const {
  if (labels.empty()) return 0;
  return *std::max_element(labels.begin(), labels.end()) + 1;
}

Dataset load_dataset(const std::string& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open dataset file '" + path + "'");

  std::string line;
  if (!std::getline(in, line) || line.find_first_not_of(" \t\r") == std::string::npos) {
    throw IngestionError("dataset file '" + path + "' is empty (missing header)");
  }
  const auto header = split_csv_line(line);
  if (header.size() < 2) {
    throw IngestionError("dataset header needs at least one feature and a label column");
  }
  const std::size_t num_features = header.size() - 1;

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw IngestionError(path + ":" + std::to_string(line_no) + ": expected " +
                           std::to_string(header.size()) + " columns, found " +
                           std::to_string(fields.size()));
    }
    for (std::size_t j = 0; j < num_features; ++j) {
      double v = 0.0;
      if (!parse_double(fields[j], v)) {
        throw IngestionError(path + ":" + std::to_string(line_no) + ": column '" +
                             header[j] + "' is not a finite number: '" + fields[j] + "'");
      }
      values.push_back(v);
    }
    int label = 0;
    if (!parse_int(fields.back(), label) || label < 0) {
      throw IngestionError(path + ":" + std::to_string(line_no) +
                           ": label must be a non-negative integer, got '" + fields.back() +
                           "'");
    }
    labels.push_back(label);
  }
  if (labels.empty()) throw IngestionError("dataset file '" + path + "' has no data rows");

  Dataset data;
  data.labels = std::move(labels);
  data.features = Eigen::Map<RowMatrix>(values.data(), static_cast<Eigen::Index>(data.labels.size()),
                                        static_cast<Eigen::Index>(num_features));
  if (options.standardize) Standardizer::fit(data).apply(data);
  return data;
}

Standardizer Standardizer::fit(const Dataset& data) {
  if (data.size() == 0) throw IngestionError("cannot standardize an empty dataset");
  Standardizer s;
  s.mean = data.features.colwise().mean().transpose();
  const RowMatrix centred = data.features.rowwise() - s.mean.transpose();
  s.scale = (centred.array().square().colwise().sum() / static_cast<double>(data.size()))
                .sqrt()
                .transpose();
  for (Eigen::Index j = 0; j < s.scale.size(); ++j) {
    if (!(s.scale[j] > 1e-12)) s.scale[j] = 1.0;
  }
  return s;
}

void Standardizer::apply(Dataset& data) const {
  if (static_cast<Eigen::Index>(data.num_features()) != mean.size()) {
    throw ContractError("standardizer fitted on a different number of features");
  }
  data.features = ((data.features.rowwise() - mean.transpose()).array().rowwise() /
                   scale.transpose().array())
                      .matrix();
}

Dataset select_rows(const Dataset& data, const std::vector<std::size_t>& rows) {
  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), data.features.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) =
        data.features.row(static_cast<Eigen::Index>(rows[i]));
    out.labels.push_back(data.labels[rows[i]]);
  }
  return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double test_fraction,
                                          std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ContractError("test_fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed, 0xda7a);
  std::shuffle(order.begin(), order.end(), rng.engine());
  const auto n_test = static_cast<std::size_t>(std::round(test_fraction * data.size()));
  std::vector<std::size_t> test(order.begin(), order.begin() + n_test);
  std::vector<std::size_t> train(order.begin() + n_test, order.end());
  return {select_rows(data, train), select_rows(data, test)};
}

}  // namespace metasg
