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

// Square linear assignment (Hungarian method, shortest augmenting path form, O(n^3)).

#pragma once

#include "unidim/error.hpp"
#include "unidim/types.hpp"

#include <limits>
#include <vector>

namespace unidim {

struct Assignment {
  std::vector<Index> col_of_row;  // a bijection on 0..n-1
  double total = 0.0;             // objective summed in row order
};

/// Minimum-cost perfect matching on a square cost matrix.
inline Assignment solve_min_cost(const Matrix& cost) {
  require(cost.rows() == cost.cols(), ErrorKind::input, "assignment needs a square matrix");
  const Index n = cost.rows();
  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; p[j] is the row matched to column j, way[] the augmenting tree.
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<Index> p(static_cast<std::size_t>(n + 1), 0), way(static_cast<std::size_t>(n + 1), 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const Index i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      require(j1 != 0, ErrorKind::numerical, "assignment cost matrix contains non-finite entries");
      for (Index j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const Index j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment a;
  a.col_of_row.assign(static_cast<std::size_t>(n), -1);
  for (Index j = 1; j <= n; ++j) a.col_of_row[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  for (Index i = 0; i < n; ++i) a.total += cost(i, a.col_of_row[static_cast<std::size_t>(i)]);
  return a;
}

/// Maximum-profit perfect matching; `total` is the summed profit.
inline Assignment solve_max_profit(const Matrix& profit) {
  Assignment a = solve_min_cost(-profit);
  a.total = 0.0;
  for (Index i = 0; i < profit.rows(); ++i) a.total += profit(i, a.col_of_row[static_cast<std::size_t>(i)]);
  return a;
}

}  // namespace unidim
