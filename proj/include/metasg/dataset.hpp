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

#ifndef METASG_DATASET_HPP
#define METASG_DATASET_HPP

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace metasg {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Labelled classification data, one observation per row.
struct Dataset {
  RowMatrix features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t num_features() const { return static_cast<std::size_t>(features.cols()); }
  int num_classes() const;
};

struct LoadOptions {
  bool standardize = false;
};

/// Reads a CSV file with a header row, float feature columns and an integer
/// label in the last column.
Dataset load_dataset(const std::string& path, const LoadOptions& options = {});

/// Per-column affine map to zero mean / unit variance. Constant columns are
/// centred but left unscaled.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;

  static Standardizer fit(const Dataset& data);
  void apply(Dataset& data) const;
};

/// Shuffled split into (train, held-out); `test_fraction` of the rows go to
/// the second set.
std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double test_fraction,
                                          std::uint64_t seed);

Dataset select_rows(const Dataset& data, const std::vector<std::size_t>& rows);

}  // namespace metasg

#endif  // METASG_DATASET_HPP
