#include <gtest/gtest.h>

#include <random>

#include "lldm/metrics.hpp"
#include "oracles.hpp"

using namespace lldm;

namespace {

EvalMatrix random_matrix(std::mt19937_64& gen, std::size_t K, std::vector<std::size_t> epochs, int rollouts) {
  std::uniform_int_distribution<int> q(0, rollouts);
  EvalMatrix m;
  m.K = K;
  m.eval_epochs = epochs;
  std::vector<std::size_t> star(K);
  for (std::size_t k = 0; k < K; ++k) {
    double best = -1;
    for (std::size_t e : epochs) {
      const double r = static_cast<double>(q(gen)) / rollouts;
      m.set(k, k, e, r);
      if (r > best) best = r, star[k] = e;
    }
  }
  for (std::size_t t = 1; t < K; ++t) {
    for (std::size_t k = 0; k < t; ++k) m.set(t, k, star[t], static_cast<double>(q(gen)) / rollouts);
  }
  return m;
}

oracle::Cube cube_of(const EvalMatrix& m) {
  return [&m](int i, int j, int e) { return m.at(i - 1, j - 1, static_cast<std::size_t>(e)); };
}

std::vector<int> ints(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST(BestCheckpoint, EarliestArgmax) {
  const std::vector<double> d{0.0, 0.5, 0.5};
  const auto b = best_checkpoint(d);
  EXPECT_EQ(b.rate, 0.5);
  EXPECT_EQ(b.index, 1u);
}

TEST(BestCheckpoint, AllZerosPicksFirst) {
  const std::vector<double> d(11, 0.0);
  EXPECT_EQ(best_checkpoint(d).index, 0u);
}

TEST(BestCheckpoint, MatchesLinearScan) {
  std::mt19937_64 gen(1);
  std::uniform_int_distribution<int> q(0, 20);
  for (int n = 0; n < 1000; ++n) {
    std::vector<double> d(11);
    for (auto& x : d) x = q(gen) / 20.0;
    std::size_t idx = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] > d[idx]) idx = i;
    }
    const auto b = best_checkpoint(d);
    ASSERT_EQ(b.index, idx);
    ASSERT_EQ(b.rate, d[idx]);
  }
}

TEST(BestCheckpoint, EmptyThrows) { EXPECT_THROW(best_checkpoint(std::vector<double>{}), MetricsError); }

TEST(Metrics, PerfectLearner) {
  EvalMatrix m{2, EvalMatrix::default_epochs(), {}};
  for (std::size_t e : m.eval_epochs) m.set(0, 0, e, 1.0), m.set(1, 1, e, 1.0);
  m.set(1, 0, 0, 1.0);
  const auto r = compute_metrics(m);
  EXPECT_EQ(r.fwt, 1.0);
  EXPECT_EQ(r.nbt, 0.0);
  EXPECT_EQ(r.auc, 1.0);
}

TEST(Metrics, ZeroLearner) {
  EvalMatrix m{3, EvalMatrix::default_epochs(), {}};
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t e : m.eval_epochs) m.set(k, k, e, 0.0);
  }
  m.set(1, 0, 0, 0.0);
  m.set(2, 0, 0, 0.0);
  m.set(2, 1, 0, 0.0);
  const auto r = compute_metrics(m);
  EXPECT_EQ(r.fwt, 0.0);
  EXPECT_EQ(r.nbt, 0.0);
  EXPECT_EQ(r.auc, 0.0);
}

TEST(Metrics, TwoTaskWorkedCase) {
  EvalMatrix m{2, {0, 5, 10}, {}};
  m.set(0, 0, 0, 0.0), m.set(0, 0, 5, 0.5), m.set(0, 0, 10, 0.5);
  m.set(1, 1, 0, 0.2), m.set(1, 1, 5, 0.2), m.set(1, 1, 10, 0.6);
  m.set(1, 0, 10, 0.4);
  const auto r = compute_metrics(m);
  EXPECT_NEAR(r.fwt, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.nbt, 0.05, 1e-15);
  EXPECT_NEAR(r.auc, 0.35, 1e-15);
  EXPECT_EQ(r.best_epoch, (std::vector<std::size_t>{5, 10}));
}

TEST(Metrics, MissingEntryNamesCoordinates) {
  EvalMatrix m{2, {0, 5}, {}};
  for (std::size_t e : {0, 5}) m.set(0, 0, e, 0.5), m.set(1, 1, e, 0.5);
  try {
    compute_metrics(m);
    FAIL() << "expected MissingEntry";
  } catch (const MetricsError& e) {
    EXPECT_EQ(e.code(), MetricsError::Code::kMissingEntry);
    EXPECT_NE(std::string(e.what()).find("i=1, j=0, e=0"), std::string::npos) << e.what();
  }
}

TEST(Metrics, MatchesOracleOnRandomMatrices) {
  std::mt19937_64 gen(7);
  for (int n = 0; n < 200; ++n) {
    const std::size_t K = 1 + gen() % 6;
    const auto m = random_matrix(gen, K, EvalMatrix::default_epochs(), 20);
    for (bool last : {true, false}) {
      if (!last && K == 1) continue;
      const auto r = compute_metrics(m, {last});
      const auto o = oracle::metrics(cube_of(m), static_cast<int>(K), ints(m.eval_epochs), last);
      ASSERT_NEAR(r.fwt, o.fwt, 1e-12);
      ASSERT_NEAR(r.nbt, o.nbt, 1e-12);
      ASSERT_NEAR(r.auc, o.auc, 1e-12);
    }
  }
}

TEST(Metrics, Bounds) {
  std::mt19937_64 gen(11);
  for (int n = 0; n < 200; ++n) {
    const auto m = random_matrix(gen, 1 + gen() % 5, {0, 5, 10, 15}, 10);
    const auto r = compute_metrics(m);
    EXPECT_GE(r.fwt, 0.0);
    EXPECT_LE(r.fwt, 1.0);
    EXPECT_GE(r.auc, 0.0);
    EXPECT_LE(r.auc, 1.0);
    EXPECT_GE(r.nbt, -1.0);
    EXPECT_LE(r.nbt, 1.0);
  }
}

TEST(Metrics, RaisingBackwardEntryLowersNbtRaisesAuc) {
  std::mt19937_64 gen(3);
  for (int n = 0; n < 100; ++n) {
    auto m = random_matrix(gen, 2 + gen() % 4, EvalMatrix::default_epochs(), 20);
    const auto before = compute_metrics(m);
    std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> off;
    for (const auto& [key, v] : m.entries) {
      if (std::get<0>(key) != std::get<1>(key)) off.push_back(key);
    }
    auto& v = m.entries[off[gen() % off.size()]];
    v = std::min(1.0, v + 0.25);
    const auto after = compute_metrics(m);
    EXPECT_LE(after.nbt, before.nbt + 1e-15);
    EXPECT_GE(after.auc, before.auc - 1e-15);
  }
}

TEST(Metrics, LaterDiagonalEntriesNeverLowerFwt) {
  // Entries after e* are read as c_kk, so a drop there changes nothing.
  EvalMatrix a{1, {0, 5, 10}, {}};
  a.set(0, 0, 0, 0.2), a.set(0, 0, 5, 0.8), a.set(0, 0, 10, 0.8);
  EvalMatrix b = a;
  b.set(0, 0, 10, 0.0);
  EXPECT_EQ(compute_metrics(a).fwt, compute_metrics(b).fwt);
  EXPECT_NEAR(compute_metrics(b).fwt, 0.6, 1e-15);
}

TEST(Metrics, LastTaskNbtFlag) {
  EvalMatrix m{2, {0}, {}};
  m.set(0, 0, 0, 1.0), m.set(1, 1, 0, 1.0), m.set(1, 0, 0, 0.5);
  EXPECT_NEAR(compute_metrics(m, {true}).nbt, 0.25, 1e-15);
  EXPECT_NEAR(compute_metrics(m, {false}).nbt, 0.5, 1e-15);
}

TEST(EvalMatrixJson, RoundTrip) {
  std::mt19937_64 gen(5);
  const auto m = random_matrix(gen, 4, EvalMatrix::default_epochs(), 20);
  EXPECT_EQ(EvalMatrix::from_json(m.to_json()), m);
  EXPECT_EQ(EvalMatrix::from_json(m.to_json()).to_json(), m.to_json());
}

TEST(EvalMatrixJson, Malformed) {
  EXPECT_THROW(EvalMatrix::from_json("{\"K\": 2}"), MetricsError);
}

TEST(MetricReport, JsonAndCsv) {
  std::mt19937_64 gen(9);
  const auto r = compute_metrics(random_matrix(gen, 3, {0, 5}, 20));
  const auto back = MetricReport::from_json(r.to_json());
  EXPECT_EQ(back.fwt, r.fwt);
  EXPECT_EQ(back.nbt_k, r.nbt_k);
  EXPECT_EQ(MetricReport::csv_header(), "fwt,nbt,auc");
  double f, n, a;
  char c1, c2;
  std::istringstream in(r.csv_row());
  in >> f >> c1 >> n >> c2 >> a;
  EXPECT_EQ(f, r.fwt);
  EXPECT_EQ(n, r.nbt);
  EXPECT_EQ(a, r.auc);
}

TEST(Aggregate, SingleSeedHasZeroSe) {
  const std::vector<double> v{0.7};
  const auto s = mean_se(v);
  EXPECT_EQ(s.mean, 0.7);
  EXPECT_EQ(s.se, 0.0);
}

TEST(Aggregate, HandFormula) {
  const std::vector<double> v{0.2, 0.4, 0.6};
  const auto s = mean_se(v);
  EXPECT_NEAR(s.mean, 0.4, 1e-15);
  EXPECT_NEAR(s.se, 0.2 / std::sqrt(3.0), 1e-15);
  EXPECT_NEAR(s.se, 0.1155, 5e-5);
  const auto o = oracle::mean_se(v);
  EXPECT_NEAR(s.se, o.second, 1e-15);
}

TEST(Aggregate, SeedOrderDoesNotMatter) {
  std::mt19937_64 gen(2);
  std::vector<MetricReport> reports;
  for (int i = 0; i < 5; ++i) reports.push_back(compute_metrics(random_matrix(gen, 3, {0, 5}, 20)));
  const auto a = aggregate_seeds(reports);
  std::reverse(reports.begin(), reports.end());
  std::swap(reports[0], reports[2]);
  const auto b = aggregate_seeds(reports);
  EXPECT_EQ(a.fwt.mean, b.fwt.mean);
  EXPECT_EQ(a.nbt.se, b.nbt.se);
  EXPECT_EQ(a.auc.mean, b.auc.mean);
  EXPECT_EQ(a.to_json(), b.to_json());
}
