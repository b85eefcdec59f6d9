#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "asvit/gradcheck.hpp"
#include "asvit/scoring.hpp"

using namespace asvit;

namespace {

Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Random class-attention rows: a softmax over n+1 keys with the class column dropped.
Tensor<double> random_cls_attn(std::size_t H, std::size_t n, std::mt19937_64& rng) {
  auto logits = random_tensor({H, n + 1}, rng, -3, 3);
  auto p = softmax_rows(logits);
  Tensor<double> a({H, n});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t j = 0; j < n; ++j) a.at(h, j) = p.at(h, j + 1);
  return a;
}

Var<double> cst(Tensor<double> t) { return Var<double>::constant(std::move(t)); }

}  // namespace

TEST(HeadImportance, Cases) {
  Tensor<double> ctx({1, 1, 2});
  ctx[0] = 3;
  ctx[1] = 4;
  EXPECT_EQ(head_importance(cst(ctx)).value().item(), 5.0);

  std::mt19937_64 rng(1);
  auto row = random_tensor({1, 3, 4}, rng, -1, 1);
  Tensor<double> same({2, 3, 4});
  for (std::size_t h = 0; h < 2; ++h) std::copy_n(row.data(), 12, same.data() + h * 12);
  auto imp = head_importance(cst(same)).value();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(imp.at(0, i), imp.at(1, i));

  auto r = random_tensor({2, 3, 4}, rng, -1, 1);
  auto got = head_importance(cst(r)).value();
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += r[(h * 3 + i) * 4 + c] * r[(h * 3 + i) * 4 + c];
      EXPECT_NEAR(got.at(h, i), std::sqrt(s), 1e-6);
    }
}

TEST(HeadWeights, Cases) {
  auto w = head_weights(cst(Tensor<double>::matrix({{5, 1}, {5, 3}}))).value();
  EXPECT_EQ(w.at(0, 0), 0.5);
  EXPECT_EQ(w.at(1, 0), 0.5);
  EXPECT_EQ(w.at(0, 1), 0.25);
  EXPECT_EQ(w.at(1, 1), 0.75);
  auto one = head_weights(cst(Tensor<double>::matrix({{0.3, 7, 0}}))).value();
  for (double v : one.values()) EXPECT_EQ(v, 1.0);
  EXPECT_THROW(head_weights(cst(Tensor<double>::matrix({{-1}, {1}}))), ContractError);
}

TEST(HeadWeights, ColumnsSumToOneIncludingDegenerateFallback) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    auto imp = random_tensor({4, 9}, rng);
    for (std::size_t h = 0; h < 4; ++h) imp.at(h, trial % 9) = 0;  // one all-zero column each time
    auto w = head_weights(cst(imp)).value();
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0;
      for (std::size_t h = 0; h < 4; ++h) {
        EXPECT_GE(w.at(h, i), 0.0);
        s += w.at(h, i);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    for (std::size_t h = 0; h < 4; ++h) EXPECT_EQ(w.at(h, trial % 9), 0.25);
  }
}

TEST(HeadWeights, ScaleInvariantPerToken) {
  std::mt19937_64 rng(3);
  auto imp = random_tensor({3, 5}, rng, 0.1, 2);
  auto scaled = imp;
  for (std::size_t h = 0; h < 3; ++h) scaled.at(h, 2) *= 17.5;
  auto a = head_weights(cst(imp)).value();
  auto b = head_weights(cst(scaled)).value();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(HeadWeights, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  auto probe = cst(random_tensor({3, 4}, rng, -1, 1));
  std::function<Var<double>(const Var<double>&)> f = [&](const Var<double>& x) {
    return sum(mul(head_weights(x), probe));
  };
  EXPECT_LT(finite_diff_check(f, random_tensor({3, 4}, rng, 0.2, 2), 1e-6), 1e-3);
}

TEST(WeightedScore, Cases) {
  auto s = weighted_score(cst(Tensor<double>::matrix({{0.25}, {0.75}})), cst(Tensor<double>::matrix({{0.2}, {0.4}})));
  EXPECT_NEAR(s.value().item(), 0.35, 1e-15);

  std::mt19937_64 rng(5);
  auto w = head_weights(cst(random_tensor({4, 6}, rng))).value();
  auto a = random_cls_attn(4, 6, rng);
  auto got = weighted_score(cst(w), cst(a)).value();
  for (std::size_t i = 0; i < 6; ++i) {
    double dot = 0;
    for (std::size_t h = 0; h < 4; ++h) dot += w.at(h, i) * a.at(h, i);
    EXPECT_NEAR(got[i], dot, 1e-6);
  }
}

TEST(VanillaScore, Cases) {
  EXPECT_NEAR(vanilla_score(cst(Tensor<double>::matrix({{0.2}, {0.4}}))).value().item(), 0.3, 1e-15);
  auto row = Tensor<double>::matrix({{0.1, 0.5, 0.2}});
  EXPECT_EQ(vanilla_score(cst(row)).value(), Tensor<double>::vector({0.1, 0.5, 0.2}));
}

TEST(ScoreProperties, UniformWeightsReduceToVanilla) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t H = 1 + trial % 6, n = 3 + trial % 11;
    auto a = random_cls_attn(H, n, rng);
    auto w = weighted_score(cst(Tensor<double>({H, n}, 1.0 / static_cast<double>(H))), cst(a)).value();
    auto v = vanilla_score(cst(a)).value();
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(w[i], v[i], 1e-6);
  }
}

TEST(ScoreProperties, SingleHeadCollapsesExactly) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = random_cls_attn(1, 10, rng);
    auto w = head_weights(cst(random_tensor({1, 10}, rng))).value();
    EXPECT_EQ(weighted_score(cst(w), cst(a)).value(), vanilla_score(cst(a)).value());
  }
}

TEST(ScoreProperties, ConvexCombinationBound) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_cls_attn(4, 8, rng);
    auto s = weighted_score(head_weights(cst(random_tensor({4, 8}, rng))), cst(a)).value();
    for (std::size_t i = 0; i < 8; ++i) {
      double mx = 0;
      for (std::size_t h = 0; h < 4; ++h) mx = std::max(mx, a.at(h, i));
      EXPECT_GE(s[i], 0.0);
      EXPECT_LE(s[i], mx + 1e-12);
      EXPECT_LE(s[i], 1.0);
    }
  }
}

TEST(ScoreReport, CsvColumns) {
  ScoreReport<float> r;
  StageScores<float> s;
  s.stage = 1;
  s.token_scores = Tensor<float>::vector({0.5f, 0.25f});
  s.token_index = {3, 7};
  s.kept = {true, false};
  r.stages.push_back(s);
  std::ostringstream os;
  r.write_csv(os);
  EXPECT_EQ(os.str(), "stage,token_index,score,kept_flag\n1,3,0.5,1\n1,7,0.25,0\n");
}
