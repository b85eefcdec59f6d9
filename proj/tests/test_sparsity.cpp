#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "asvit/gradcheck.hpp"
#include "asvit/vit.hpp"

using namespace asvit;

namespace {

Var<double> cst(Tensor<double> t) { return Var<double>::constant(std::move(t)); }
Var<double> theta_of(double t) { return Var<double>::constant(Tensor<double>::scalar(t)); }

}  // namespace

TEST(HardMask, Cases) {
  auto s = Tensor<float>::vector({0.1f, 0.001f, 0.05f});
  EXPECT_EQ(hard_mask(s, 0.01f), Tensor<float>::vector({1, 0, 1}));
  EXPECT_EQ(hard_mask(s, -1.f), Tensor<float>::vector({1, 1, 1}));
  EXPECT_EQ(hard_mask(Tensor<float>::vector({0.25f}), 0.25f), Tensor<float>::vector({0}));
}

TEST(SoftMask, Cases) {
  EXPECT_EQ(soft_mask(cst(Tensor<double>::vector({0.3})), theta_of(0.3), 1e4).value().item(), 0.5);
  EXPECT_NEAR(soft_mask(cst(Tensor<double>::vector({0.02})), theta_of(0.01), 1e4).value().item(), 1.0, 1e-12);
  EXPECT_NEAR(soft_mask(cst(Tensor<double>::vector({1.5})), theta_of(0.5), 1.0).value().item(), 0.7310585786, 1e-9);
  EXPECT_THROW(soft_mask(cst(Tensor<double>::vector({1})), theta_of(0), 0.0), ContractError);
}

TEST(SoftMask, StaysWithinHalfOfHardMask) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 0.1);
  for (int i = 0; i < 1000; ++i) {
    const double s = u(rng), th = u(rng);
    if (s == th) continue;
    const double soft = soft_mask(cst(Tensor<double>::vector({s})), theta_of(th), 100.0).value().item();
    const double hard = s > th ? 1.0 : 0.0;
    EXPECT_LT(std::abs(soft - hard), 0.5);
  }
}

TEST(SteMask, ForwardEqualsHardMask) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0, 0.05f);
  for (int i = 0; i < 10000; ++i) {
    auto s = Tensor<float>::vector({u(rng)});
    const float th = u(rng);
    auto m = ste_mask(Var<float>::constant(s), Var<float>::constant(Tensor<float>::scalar(th)), 1e4f).value();
    EXPECT_EQ(m, hard_mask(s, th));
  }
}

TEST(SteMask, ThresholdGradientMatchesAnalyticAndFiniteDifferences) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  const double T = 10;
  Tensor<double> s({6}), c({6});
  for (std::size_t i = 0; i < 6; ++i) {
    s[i] = u(rng) * 0.3;
    c[i] = u(rng) - 0.5;
  }
  const double th = 0.12;
  GradTape<double> tape;
  auto theta = Var<double>::param(Tensor<double>::scalar(th));
  tape.backward(sum(mul(ste_mask(cst(s), theta, T), cst(c))));
  double analytic = 0;
  for (std::size_t i = 0; i < 6; ++i) analytic -= c[i] * T * stable_sigmoid_grad(T * (s[i] - th));
  EXPECT_NEAR(theta.grad().item(), analytic, 1e-12);
  // The surrogate the STE differentiates is the soft mask.
  std::function<Var<double>(const Var<double>&)> soft = [&](const Var<double>& t) {
    return sum(mul(soft_mask(cst(s), t, T), cst(c)));
  };
  EXPECT_LT(finite_diff_check(soft, Tensor<double>::scalar(th), 1e-5), 1e-3);
}

TEST(SteMask, GradientSignsAndSaturation) {
  GradTape<double> tape;
  auto scores = Var<double>::param(Tensor<double>::vector({0.10, 0.11, 0.5}));
  auto theta = Var<double>::param(Tensor<double>::scalar(0.105));
  tape.backward(sum(ste_mask(scores, theta, 1e4)));
  EXPECT_LT(theta.grad().item(), 0.0);
  EXPECT_GT(scores.grad()[0], 0.0);
  EXPECT_EQ(scores.grad()[2], 0.0);  // |T(s - theta)| > 80

  GradTape<double> tape2;
  auto far = Var<double>::param(Tensor<double>::scalar(0.9));
  tape2.backward(sum(ste_mask(cst(Tensor<double>::vector({0.0, 0.01})), far, 1e4)));
  EXPECT_EQ(far.grad().item(), 0.0);
}

TEST(AttentionMask, Cases) {
  auto logits = Tensor<float>::matrix({{0.1f, 0.2f, 0.3f}, {1.f, 2.f, 3.f}});
  EXPECT_EQ(apply_attention_mask(Tensor<float>::vector({1, 1}), logits), logits);
  auto masked = apply_attention_mask(Tensor<float>::vector({1, 0}), logits);
  auto p = softmax_rows(masked);
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_LE(p.at(r, 2), 1e-30f);
    EXPECT_EQ(masked.at(r, 0), logits.at(r, 0));  // class column untouched
  }
  // masked softmax over kept keys equals softmax of the gathered sub-row
  auto sub = softmax_rows(Tensor<float>::matrix({{0.1f, 0.2f}, {1.f, 2.f}}));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(p.at(r, j), sub.at(r, j), 1e-6);
}

TEST(ActivationMask, ScalesRows) {
  Tensor<double> f({1, 4, 2}, 2.0);
  auto mask = cst(Tensor<double>::matrix({{1, 0, 0.5}}));
  auto y = apply_activation_mask(mask, cst(f)).value();
  const double want[] = {2, 2, 2, 2, 0, 0, 1, 1};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(y[i], want[i]);
}

TEST(PruneInference, Cases) {
  Tensor<float> x({4, 2});
  for (std::size_t i = 0; i < 8; ++i) x[i] = static_cast<float>(i);
  auto tokens = Var<float>::constant(x);
  auto all = prune_inference(tokens, Tensor<float>::vector({0.5f, 0.001f, 0.3f}), -1.f);
  EXPECT_EQ(all.kept, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(all.tokens.value(), x);

  auto r = prune_inference(tokens, Tensor<float>::vector({0.5f, 0.001f, 0.3f}), 0.01f);
  EXPECT_EQ(r.kept, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(r.tokens.value(), Tensor<float>::matrix({{0, 1}, {2, 3}, {6, 7}}));
  EXPECT_FALSE(r.all_pruned);

  auto none = prune_inference(tokens, Tensor<float>::vector({0.1f, 0.4f, 0.3f}), 0.9f);
  EXPECT_TRUE(none.all_pruned);
  EXPECT_EQ(none.kept, (std::vector<std::size_t>{1}));
}

TEST(BatchK, Cases) {
  Tensor<float> one({1, 30});
  for (std::size_t i = 0; i < 12; ++i) one[i] = 1;
  EXPECT_EQ(batch_k(one, 0.5f), 12u);
  Tensor<float> two({2, 30});
  for (std::size_t i = 0; i < 10; ++i) two[i] = 1;
  for (std::size_t i = 0; i < 20; ++i) two[30 + i] = 1;
  EXPECT_EQ(batch_k(two, 0.5f), 15u);
  EXPECT_EQ(batch_k(Tensor<float>({3, 8}), 0.5f), 1u);
}

TEST(BatchK, SingleImageSelectorReproducesThresholdKeep) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0, 0.05f);
  auto sel = threshold_gather_selector<float>({0.02f});
  for (int t = 0; t < 100; ++t) {
    Tensor<float> s({1, 20});
    for (auto& v : s.values()) v = u(rng);
    EXPECT_EQ(sel(0, s)[0], threshold_keep<float>(s.values(), 0.02f));
  }
}

TEST(FixedRatio, Cases) {
  auto s = Tensor<float>::vector({0.4f, 0.3f, 0.2f, 0.1f});
  EXPECT_EQ(fixed_ratio_topk(s, 1.0), Tensor<float>::vector({1, 1, 1, 1}));
  EXPECT_EQ(fixed_ratio_topk(s, 0.5), Tensor<float>::vector({1, 1, 0, 0}));
  std::vector<float> v(s.values().begin(), s.values().end());
  EXPECT_EQ(mink_indices(std::span<const float>(v), 2), (std::vector<std::size_t>{2, 3}));
  std::mt19937_64 a(7), b(7);
  auto r1 = random_indices(50, 13, a);
  EXPECT_EQ(r1.size(), 13u);
  EXPECT_EQ(r1, random_indices(50, 13, b));
  EXPECT_TRUE(std::is_sorted(r1.begin(), r1.end()));
  EXPECT_EQ(std::adjacent_find(r1.begin(), r1.end()), r1.end());
}

TEST(Stages, MasksAreMonotoneAndSafeguardFires) {
  ModelConfig cfg{8, 2, 3, 16, 2, 4, 2, 5};
  std::mt19937_64 rng(5);
  auto w = ViTWeights<float>::init(cfg, rng);
  Tensor<float> img({2, 3, 8, 8});
  std::uniform_real_distribution<float> u(-1, 1);
  for (auto& v : img.values()) v = u(rng);
  PruneConfig pc;
  pc.locations = {1, 2, 3};
  pc.thresholds = {0.05, 0.06, 1.0};  // the last stage prunes everything
  std::vector<float> th(pc.thresholds.begin(), pc.thresholds.end());
  PrunePolicy<float> masked{pc, ExecMode::Masked, hard_threshold_selector<float>(th), {}};
  PrunePolicy<float> gathered{pc, ExecMode::Gather, {}, threshold_gather_selector<float>(th)};
  auto out = forward(img, w, &masked);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t s = 1; s < 3; ++s)
      for (auto j : out.trace.stages[s].kept[b]) {
        const auto& prev = out.trace.stages[s - 1].kept[b];
        EXPECT_TRUE(std::binary_search(prev.begin(), prev.end(), j));
      }
  EXPECT_EQ(out.trace.stages[2].safeguard_events, 2u);
  for (std::size_t b = 0; b < 2; ++b) EXPECT_EQ(out.trace.stages[2].kept[b].size(), 1u);
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor<float> one({1, 3, 8, 8});
    std::copy_n(img.data() + b * 192, 192, one.data());
    auto m = forward(one, w, &masked);
    auto g = forward(one, w, &gathered);
    for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(m.trace.stages[s].kept[0], g.trace.stages[s].kept[0]);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(m.logits.value()[i], g.logits.value()[i], 1e-4);
  }
}

TEST(Stages, SoftPathComposesAcrossStages) {
  // Effective mask at a later stage is the product with earlier STE masks; gradients reach every theta.
  ModelConfig cfg{8, 2, 3, 16, 2, 4, 2, 5};
  std::mt19937_64 rng(6);
  auto w = ViTWeights<float>::init(cfg, rng);
  Tensor<float> img({2, 3, 8, 8});
  std::uniform_real_distribution<float> u(-1, 1);
  for (auto& v : img.values()) v = u(rng);
  PruneConfig pc;
  pc.locations = {1, 2, 3};
  pc.thresholds = {0.04, 0.05, 0.055};  // below the near-uniform score 1/17, so every stage keeps tokens
  std::vector<Var<float>> thetas;
  for (double t : pc.thresholds) thetas.push_back(Var<float>::param(Tensor<float>::scalar(static_cast<float>(t))));
  PrunePolicy<float> pol{pc, ExecMode::Masked, ste_threshold_selector<float>(thetas, 10.f), {}};
  GradTape<float> tape;
  auto out = forward(img, w, &pol);
  Var<float> total = out.trace.stages[0].kept_tokens;
  for (std::size_t s = 1; s < 3; ++s) total = add(total, out.trace.stages[s].kept_tokens);
  tape.backward(sum(total));
  for (auto& t : thetas) EXPECT_LT(t.grad().item(), 0.0f);
}

TEST(MaskDump, GridFormat) {
  std::ostringstream os;
  write_mask_grid(os, 3, 2, {1, 0, 0, 1}, 2);
  EXPECT_EQ(os.str(), "# image 3 stage 2\n10\n01\n");
}
