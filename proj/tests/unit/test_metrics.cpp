#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "medseg/error.hpp"
#include "medseg/metrics.hpp"

using namespace medseg;

namespace {

BinaryMask3D mask(const std::vector<std::uint8_t>& v) { return {{1, 1, static_cast<int>(v.size())}, {}, v}; }

// Brute-force two-sided exact p: enumerate every assignment of ranks 1..N to
// the first sample.
double enumerated_p(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> pooled(x);
  pooled.insert(pooled.end(), y.begin(), y.end());
  std::vector<double> sorted(pooled);
  std::sort(sorted.begin(), sorted.end());
  auto rank = [&](double v) { return static_cast<int>(std::find(sorted.begin(), sorted.end(), v) - sorted.begin()) + 1; };
  int observed = 0;
  for (double v : x) observed += rank(v);
  const int total = static_cast<int>(pooled.size()), m = static_cast<int>(x.size());
  long le = 0, ge = 0, all = 0;
  for (int bits = 0; bits < (1 << total); ++bits) {
    if (__builtin_popcount(bits) != m) continue;
    int s = 0;
    for (int i = 0; i < total; ++i)
      if (bits & (1 << i)) s += i + 1;
    ++all;
    le += s <= observed;
    ge += s >= observed;
  }
  return std::min(1.0, 2.0 * static_cast<double>(std::min(le, ge)) / static_cast<double>(all));
}

}  // namespace

TEST(Dice, MatchesCountsAndConventions) {
  std::mt19937_64 rng(1);
  std::bernoulli_distribution coin(0.3);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::uint8_t> a(200), b(200);
    for (auto& v : a) v = coin(rng);
    for (auto& v : b) v = coin(rng);
    int inter = 0, na = 0, nb = 0;
    for (int i = 0; i < 200; ++i) {
      inter += a[i] && b[i];
      na += a[i];
      nb += b[i];
    }
    EXPECT_DOUBLE_EQ(dice(mask(a), mask(b)), 2.0 * inter / (na + nb));
    EXPECT_DOUBLE_EQ(dice(mask(a), mask(b)), dice(mask(b), mask(a)));
  }
  EXPECT_EQ(dice(mask({0, 0}), mask({0, 0})), 1.0);
  EXPECT_EQ(dice(mask({1, 0}), mask({0, 0})), 0.0);
  EXPECT_EQ(dice(mask({1, 1}), mask({1, 1})), 1.0);
  EXPECT_THROW(dice(mask({1, 0}), mask({1, 0, 0})), ShapeError);
}

TEST(ErrorRates, NormalizedByGroundTruth) {
  const auto r = error_rates(mask({1, 1, 1, 0, 0}), mask({0, 1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(r.fp_rate, 0.25);
  EXPECT_DOUBLE_EQ(r.fn_rate, 0.5);
  EXPECT_THROW(error_rates(mask({1, 0}), mask({0, 0})), DataError);
}

TEST(DiceReport, SummaryUsesSampleStd) {
  const auto r = DiceReport::from_scores({{"a", 0.8}, {"b", 0.9}, {"c", 1.0}});
  EXPECT_NEAR(r.mean, 0.9, 1e-15);
  EXPECT_NEAR(r.std, 0.1, 1e-15);
  EXPECT_EQ(DiceReport::from_scores({{"a", 0.7}}).std, 0.0);
  EXPECT_NE(r.to_csv().find("subject_id"), std::string::npos);
}

TEST(RankSum, ExactMatchesEnumeration) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int m = 1; m <= 6; ++m)
    for (int n = 1; n + m <= 12; n += 2) {
      std::vector<double> x(m), y(n);
      for (auto& v : x) v = u(rng);
      for (auto& v : y) v = u(rng) + 0.2;
      const auto r = wilcoxon_rank_sum(x, y);
      EXPECT_TRUE(r.exact);
      EXPECT_NEAR(r.p_two_sided, enumerated_p(x, y), 1e-12) << m << "," << n;
    }
}

TEST(RankSum, SmallestPossibleTwoByTwo) {
  const auto r = wilcoxon_rank_sum({1.0, 2.0}, {3.0, 4.0});
  EXPECT_TRUE(r.exact);
  EXPECT_EQ(r.u, 0.0);
  EXPECT_NEAR(r.p_two_sided, 1.0 / 3.0, 1e-15);
}

TEST(RankSum, NormalApproximationMatchesReference) {
  // Reference values: asymptotic Mann-Whitney with tie and continuity correction.
  const auto tied = wilcoxon_rank_sum({1.1, 2.2, 2.2, 3.5, 4.0, 5.1, 6.3, 7.7}, {2.2, 3.0, 3.5, 8.1, 9.4, 9.9, 10.2});
  EXPECT_FALSE(tied.exact);
  EXPECT_DOUBLE_EQ(tied.u, 15.5);
  EXPECT_NEAR(tied.p_two_sided, 0.1630243843065704, 1e-12);
  const auto large = wilcoxon_rank_sum({1, 2, 3, 4, 5, 6, 7}, {4.5, 5.5, 6.5, 7.5, 8.5, 9.5, 10.5, 11.5});
  EXPECT_FALSE(large.exact);
  EXPECT_DOUBLE_EQ(large.u, 6.0);
  EXPECT_NEAR(large.p_two_sided, 0.012841262337219548, 1e-12);
}

TEST(RankSum, SymmetricAndBounded) {
  const std::vector<double> x = {0.3, 0.9, 0.4, 0.75}, y = {0.5, 0.6, 0.1};
  EXPECT_DOUBLE_EQ(wilcoxon_rank_sum(x, y).p_two_sided, wilcoxon_rank_sum(y, x).p_two_sided);
  const auto same = wilcoxon_rank_sum({0.5, 0.5, 0.5}, {0.5, 0.5});
  EXPECT_EQ(same.p_two_sided, 1.0);
  EXPECT_THROW(wilcoxon_rank_sum({}, {1.0}), DataError);
}

TEST(CompareRuns, RequiresSameSubjects) {
  const auto a = DiceReport::from_scores({{"s1", 0.9}, {"s2", 0.8}});
  const auto b = DiceReport::from_scores({{"s2", 0.7}, {"s1", 0.6}});
  const auto c = DiceReport::from_scores({{"s1", 0.7}, {"s3", 0.6}});
  EXPECT_NEAR(compare_runs(a, b), 1.0 / 3.0, 1e-15);
  EXPECT_THROW(compare_runs(a, c), DataError);
}
