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

// Acceptance checks. Usage: acceptance <unidim-cli> <work-dir>
// Prints one PASS/FAIL line per criterion and exits nonzero if any fails.

#include "oracles.hpp"
#include "unidim/alignment.hpp"
#include "unidim/content.hpp"
#include "unidim/fixtures.hpp"
#include "unidim/kernel.hpp"
#include "unidim/snmf.hpp"
#include "unidim/stats.hpp"
#include "unidim/synthetic.hpp"
#include "unidim/universality.hpp"

#include <Eigen/Eigenvalues>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <sys/wait.h>

using namespace unidim;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double median_of(std::vector<double> x) { return stats::median(std::move(x)); }

Outcome planted_recovery() {
  const auto t0 = Clock::now();
  const Matrix truth = synthetic::planted_factors(200, 8, 17);
  const double overlap = synthetic::max_column_overlap(truth);
  SimilarityMatrix S;
  S.model_id = "planted";
  S.values = truth * truth.transpose();
  S.alpha = 1.0;
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  const auto fits = fit_seeds(S, 8, seeds);
  const auto best = std::min_element(fits.begin(), fits.end(),
                                     [](const Embedding& a, const Embedding& b) { return a.objective < b.objective; });
  const double score = solve_max_profit(cos2_matrix(truth, best->W)).total / 8.0;
  const double secs = seconds_since(t0);
  return {overlap < 0.1 && score >= 0.95 && secs < 60.0,
          "max overlap " + fmt(overlap) + ", matched cos2 " + fmt(score) + ", " + fmt(secs) + " s"};
}

Outcome universality_separation() {
  const auto t0 = Clock::now();
  synthetic::EnsembleOptions eo;
  eo.models = 10;
  eo.categories = 50;
  eo.exemplars = 10;
  eo.shared = 4;
  eo.private_dims = 4;
  eo.seed = 21;
  const auto pe = synthetic::planted_ensemble(eo);
  NullOptions opts;
  opts.permutations = 1000;
  opts.rng_seed = 21;
  const UniversalityEnsemble ens(pe.models, opts);
  std::vector<double> shared, priv;
  for (std::size_t m = 0; m < ens.size(); ++m) {
    const auto rep = ens.report(m);
    for (std::size_t k = 0; k < rep.calibrated.size(); ++k) (pe.is_shared[m][k] ? shared : priv).push_back(rep.calibrated[k]);
  }
  const double min_shared = *std::min_element(shared.begin(), shared.end());
  const double max_private = *std::max_element(priv.begin(), priv.end());
  const double ms = median_of(shared), mp = median_of(priv);
  const double secs = seconds_since(t0);
  return {min_shared > max_private && ms >= 0.8 && mp <= 0.05 && secs < 300.0,
          "min shared " + fmt(min_shared) + " > max private " + fmt(max_private) + ", median shared " + fmt(ms) +
              ", median private " + fmt(mp) + ", " + fmt(secs) + " s"};
}

Outcome hungarian_exactness() {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int exact = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const Index r = 1 + rep % 7;
    Matrix P(r, r);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < r; ++j) P(i, j) = u(rng);
    if (solve_max_profit(P).total == oracle::brute_force_max(P)) ++exact;
  }
  return {exact == 100, std::to_string(exact) + "/100 totals equal the brute-force maximum"};
}

Outcome null_rate() {
  // Rank 16 keeps the binomial spread of the pooled rate well inside the band.
  const Index n = 200, r = 16;
  const int pairs = 50;
  Rng rng(41);
  int exceed = 0, total = 0;
  std::vector<double> calibrated;
  for (int p = 0; p < pairs; ++p) {
    const Matrix A = synthetic::random_embedding(n, r, rng);
    const Matrix B = synthetic::random_embedding(n, r, rng);
    const auto ps = pair_scores(A, B, 1000, 41, 2 * static_cast<std::uint64_t>(p), 2 * static_cast<std::uint64_t>(p) + 1);
    const Matrix* nulls[] = {&ps.null};
    const auto th = thresholds_from_nulls(nulls, 0.95);
    const Matrix raw = Eigen::Map<const Eigen::RowVectorXd>(ps.raw.data(), r);
    const auto cal = calibrate(raw, th);
    for (std::size_t k = 0; k < cal.pre_clamp.size(); ++k) {
      exceed += cal.pre_clamp[k] > 0;
      ++total;
      calibrated.push_back(cal.calibrated[k]);
    }
  }
  const double rate = static_cast<double>(exceed) / static_cast<double>(total);
  const double med = median_of(calibrated);
  return {std::abs(rate - 0.05) <= 0.02 && med <= 0.02,
          "exceedance " + fmt(rate) + " over " + std::to_string(total) + " dimensions, median calibrated " + fmt(med)};
}

Outcome eta2_chance() {
  const int C = 50, J = 12, draws = 200;
  std::vector<int> labels;
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < J; ++j) labels.push_back(c);
  const auto cats = CategoryIndex::from_labels(labels);
  std::mt19937_64 rng(51);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double sum = 0;
  Vector w(C * J);
  for (int d = 0; d < draws; ++d) {
    for (Index i = 0; i < w.size(); ++i) w(i) = u(rng);
    sum += eta_squared(w, cats).eta2;
  }
  const double m = sum / draws, chance = (C - 1.0) / (C * J - 1.0);
  return {std::abs(m - chance) <= 0.02, "mean eta2 " + fmt(m) + " vs chance " + fmt(chance)};
}

Outcome kernel_properties() {
  std::mt19937_64 rng(61);
  std::uniform_int_distribution<int> size(10, 60), dims(2, 30);
  std::normal_distribution<double> g(0.0, 1.0);
  const RunConfig defaults;
  int bad_monotone = 0, bad_psd = 0;
  double worst = 0;
  for (int rep = 0; rep < 100; ++rep) {
    FeatureMatrix f;
    f.model_id = "fixture";
    f.values.resize(size(rng), dims(rng));
    for (Index i = 0; i < f.values.size(); ++i) f.values.data()[i] = g(rng);
    const auto grid = kernel_grid(f, defaults.alpha_grid);
    const Index n = f.values.rows();
    for (std::size_t a = 1; a < grid.size(); ++a)
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
          if (i != j && !(grid[a].values(i, j) > grid[a - 1].values(i, j))) ++bad_monotone;
    for (const auto& s : grid) {
      const Vector ev = Eigen::SelfAdjointEigenSolver<Matrix>(s.values, Eigen::EigenvaluesOnly).eigenvalues();
      const double rel = ev.minCoeff() / ev.maxCoeff();
      worst = std::min(worst, rel);
      if (rel < -1e-6) ++bad_psd;
    }
  }
  return {bad_monotone == 0 && bad_psd == 0, std::to_string(bad_monotone) + " non-increasing entries, " +
                                                 std::to_string(bad_psd) + " non-PSD matrices, worst min/max eigenvalue " +
                                                 fmt(worst)};
}

Outcome ridge_oracle() {
  std::mt19937_64 rng(71);
  std::normal_distribution<double> g(0.0, 1.0);
  const Index n = 100, d = 6, train = 80;
  Matrix X(n, d);
  Vector y(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) X(i, j) = g(rng) + 1.0;
    y(i) = X.row(i).sum() + g(rng);
  }
  const Matrix Xt = X.topRows(train);
  const Vector yt = y.head(train);
  const Matrix Xc = Xt.rowwise() - Xt.colwise().mean();
  const Vector yc = yt.array() - yt.mean();
  double err = 0;
  for (double l : {1e-3, 0.1, 1.0, 10.0, 1000.0}) {
    err = std::max(err, (ridge_fit(Xt, yt, l, false).beta - oracle::ridge(Xt, yt, l)).cwiseAbs().maxCoeff());
    err = std::max(err, (ridge_fit(Xt, yt, l).beta - oracle::ridge(Xc, yc, l)).cwiseAbs().maxCoeff());
  }

  RidgeOptions opts;
  opts.grid = {1e-3, 1e-2, 1e-1, 1, 10, 100, 1000};
  opts.seed = 72;
  const Matrix W = X.cwiseAbs();
  Matrix Y(n, 3);
  for (Index j = 0; j < 3; ++j) {
    Vector beta(d);
    for (Index k = 0; k < d; ++k) beta(k) = g(rng);
    for (Index i = 0; i < n; ++i) Y(i, j) = W.row(i).dot(beta) + 0.5 * g(rng);
  }
  const auto clean = ridge_encode(W, Y, opts);
  const auto folds = assign_folds(n, opts.folds, opts.seed);
  int changed = 0;
  for (int f = 0; f < opts.folds; ++f) {
    Matrix poisoned = Y;
    for (Index i = 0; i < n; ++i)
      if (folds[static_cast<std::size_t>(i)] == f) poisoned.row(i).setConstant(1e6 * static_cast<double>(i % 5 + 1));
    const auto p = ridge_encode(W, poisoned, opts);
    if (p.lambdas[static_cast<std::size_t>(f)] != clean.lambdas[static_cast<std::size_t>(f)]) ++changed;
  }
  return {err <= 1e-8 && changed == 0,
          "max coefficient error " + fmt(err) + ", folds whose penalty changed under poisoning: " + std::to_string(changed)};
}

Outcome triplet_calibration() {
  Rng rng(81);
  const Matrix E = synthetic::random_embedding(60, 8, rng);
  const auto random = synthetic::random_triplets(60, 10000, rng);
  const double chance = triplet_accuracy(E, random).accuracy;

  synthetic::EnsembleOptions eo;
  eo.models = 10;
  eo.categories = 40;
  eo.exemplars = 5;
  eo.seed = 82;
  const auto pe = synthetic::planted_ensemble(eo);
  const Matrix truth = category_embedding(pe.shared_basis, pe.categories);
  const auto planted = synthetic::planted_triplets(truth, 3000, 0.1, rng);
  NullOptions opts;
  opts.permutations = 200;
  opts.rng_seed = 82;
  const UniversalityEnsemble ens(pe.models, opts);
  std::vector<double> uni, spec;
  for (std::size_t m = 0; m < ens.size(); ++m) {
    const auto h = half_masked_evaluation(pe.models[m].W, ens.report(m), [&](const Matrix& M) {
      return triplet_accuracy(category_embedding(M, pe.categories), planted).accuracy;
    });
    uni.push_back(h.universal_half_score);
    spec.push_back(h.specific_half_score);
  }
  const double p = stats::sign_test_greater(uni, spec);
  return {std::abs(chance - 1.0 / 3.0) <= 0.03 && p < 0.05,
          "random accuracy " + fmt(chance) + ", universal half " + fmt(stats::mean(uni)) + " vs specific half " +
              fmt(stats::mean(spec)) + ", sign test p " + fmt(p)};
}

Outcome statistics_identities() {
  std::mt19937_64 rng(91);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::string> failed;

  // Equal sizes and variances: Welch and Student coincide.
  double welch_gap = 0;
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> z(8);
    for (auto& v : z) v = g(rng);
    const double m = stats::mean(z), s = stats::sd(z);
    std::vector<double> a, b;
    for (std::size_t i = 0; i < z.size(); ++i) {
      a.push_back((z[i] - m) / s + 1.0);
      b.push_back((z[(i + 3) % z.size()] - m) / s);
    }
    const auto w = stats::welch_t(a, b);
    const auto t = stats::student_t(a, b);
    welch_gap = std::max({welch_gap, std::abs(w.t - t.t), std::abs(w.df - t.df), std::abs(w.p - t.p)});
  }
  if (welch_gap > 1e-10) failed.push_back("Welch/Student gap " + fmt(welch_gap));

  double f_gap = 0;
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> a(5 + rep % 4), b(4 + rep % 5);
    for (auto& v : a) v = g(rng);
    for (auto& v : b) v = g(rng) + 0.5;
    const auto t = stats::student_t(a, b);
    const auto f = stats::oneway_anova({a, b}, 0);
    f_gap = std::max({f_gap, std::abs(f.F - t.t * t.t) / std::max(1.0, f.F), std::abs(f.p - t.p)});
  }
  if (f_gap > 1e-10) failed.push_back("F vs t^2 gap " + fmt(f_gap));

  for (int rep = 0; rep < 1000; ++rep) {
    const double p = u(rng), q = u(rng);
    const int m = 1 + rep % 9;
    const double cp = stats::bonferroni(p, m), cq = stats::bonferroni(q, m);
    if (cp < p || cp > 1.0 || (p <= q && cp > cq) || stats::bonferroni(p, m + 1) < cp) {
      failed.push_back("Bonferroni monotonicity");
      break;
    }
  }

  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> x(15), y(15), fx, fy;
    for (auto& v : x) v = g(rng);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + g(rng);
    for (double v : x) fx.push_back(std::exp(3 * v));
    for (double v : y) fy.push_back(v * v * v - 10);
    if (stats::spearman(x, y).coefficient != stats::spearman(fx, fy).coefficient) {
      failed.push_back("Spearman monotone invariance");
      break;
    }
  }

  std::vector<double> ps;
  for (int e = 0; e < 200; ++e) {
    std::vector<double> pop(60);
    for (auto& v : pop) v = g(rng);
    const std::vector<double> group(pop.begin(), pop.begin() + 7);
    ps.push_back(stats::sd_bootstrap_test(group, pop, 1000, 900 + static_cast<std::uint64_t>(e)));
  }
  const auto ks = stats::ks_uniform(ps);
  if (ks.p <= 0.10) failed.push_back("SD bootstrap null KS p " + fmt(ks.p));

  std::string detail = "Welch/Student gap " + fmt(welch_gap) + ", F/t^2 gap " + fmt(f_gap) + ", SD-bootstrap KS p " +
                       fmt(ks.p);
  for (const auto& f : failed) detail += "; failed: " + f;
  return {failed.empty(), detail};
}

int run_cli(const std::string& cli, const std::string& args, std::string& output) {
  const std::string cmd = "'" + cli + "' " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return -1;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) output.append(buf, n);
  const int status = ::pclose(pipe);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> report_csvs(const fs::path& ws) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(ws / "report"))
    if (e.path().extension() == ".csv") out[e.path().filename().string()] = read_text(e.path());
  return out;
}

Outcome end_to_end(const std::string& cli, const fs::path& work) {
  fs::remove_all(work);
  fs::create_directories(work);
  synthetic::FixtureOptions o;  // 10 models, 30 x 10 images, rank 8, 3 seeds, 200 permutations
  const fs::path config = synthetic::write_fixture(work / "fixture", o);
  const auto t0 = Clock::now();
  std::string log;
  for (const char* ws : {"ws_a", "ws_b"}) {
    const int code = run_cli(cli, "--config '" + config.string() + "' --workspace '" + (work / ws).string() + "' run", log);
    if (code != 0) return {false, "unidim run exited " + std::to_string(code) + ": " + log};
  }
  const double secs = seconds_since(t0);
  const auto a = report_csvs(work / "ws_a"), b = report_csvs(work / "ws_b");
  int differ = 0;
  for (const auto& [name, bytes] : a)
    if (!b.count(name) || b.at(name) != bytes) ++differ;
  const bool same = differ == 0 && a.size() == b.size() && a.size() >= 5;
  return {same && secs < 600.0, std::to_string(a.size()) + " report CSVs, " + std::to_string(differ) +
                                    " differ, two runs in " + fmt(secs) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: acceptance <unidim-cli> <work-dir>\n";
    return 2;
  }
  const std::string cli = argv[1];
  const fs::path work = argv[2];

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"planted-factor recovery", planted_recovery},
      {"universality separation", universality_separation},
      {"hungarian exactness", hungarian_exactness},
      {"null calibration rate", null_rate},
      {"eta2 chance level", eta2_chance},
      {"kernel monotonicity and PSD", kernel_properties},
      {"ridge oracle and leakage", ridge_oracle},
      {"triplet chance and half masks", triplet_calibration},
      {"statistics identities", statistics_identities},
      {"end-to-end determinism", [&] { return end_to_end(cli, work / "e2e"); }},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome r;
    try {
      r = check();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    failures += !r.pass;
    std::cout << (r.pass ? "PASS " : "FAIL ") << name << ": " << r.detail << std::endl;
  }
  std::cout << (criteria.size() - static_cast<std::size_t>(failures)) << "/" << criteria.size() << " criteria passed"
            << std::endl;
  return failures == 0 ? 0 : 1;
}
