/*
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace unidim {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Activations of one model over the shared image set (rows = images).
struct FeatureMatrix {
  std::string model_id;
  Matrix values;
  std::vector<std::string> image_ids;
  int source_width = 64;  // 32 or 64, as read from disk

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
};

/// RBF gram matrix S with the bandwidth it was built with.
struct SimilarityMatrix {
  std::string model_id;
  Matrix values;
  double alpha = 0.0;
  double sigma = 0.0;
  double median_distance = 0.0;
};

/// Non-negative loadings W (N x r) from one symmetric NMF fit.
struct Embedding {
  std::string model_id;
  Matrix W;
  std::uint64_t seed = 0;
  double alpha = 0.0;
  double objective = 0.0;
  double explained_variance = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;  // objective before each sweep, then the final value

  Index rank() const { return W.cols(); }
  Index rows() const { return W.rows(); }
};

/// Per-dimension universality of one model against its partner set.
struct UniversalityReport {
  std::string model_id;
  std::vector<double> raw;
  std::vector<double> thresholds;
  std::vector<double> calibrated;
  std::vector<bool> zero_column;
  double model_mean = 0.0;  // U_m

  std::size_t rank() const { return raw.size(); }
};

}  // namespace unidim
