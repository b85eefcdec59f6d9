#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "asvit/train.hpp"

namespace asvit {

// ---------------------------------------------------------------------------
// Throughput and latency

enum class BenchMode { Dense, Pruned };

struct BenchOptions {
  std::size_t batch_size = 64;
  std::size_t throughput_rounds = 5;  // timed passes over the prepared batches
  std::size_t latency_runs = 100;
  std::size_t warmup = 10;
};

struct BenchResult {
  std::string model_id;
  BenchMode mode = BenchMode::Dense;
  double budget = 1.0;
  double flops_fraction = 1.0;
  std::size_t batch_size = 0;
  double throughput = 0;  // images per second
  double latency_mean_ms = 0;
  double latency_std_ms = 0;
  std::size_t latency_runs = 0;
  std::size_t warmup = 0;
  double accuracy = 0;
};

/// Inference policy for a pruned checkpoint: tokens are physically removed.
inline PrunePolicy<float> gather_policy(const PruneConfig& p) {
  std::vector<float> th(p.thresholds.begin(), p.thresholds.end());
  return PrunePolicy<float>{p, ExecMode::Gather, {}, threshold_gather_selector<float>(th)};
}

/// Wall-clock throughput at a fixed batch size and batch-1 latency. Batches are assembled before
/// timing starts; scoring and token gathering are inside the timed region. Accuracy and cost come
/// from batch-1 inference so every image uses its own thresholds.
inline BenchResult run_bench(const ViTWeights<float>& w, const std::optional<PruneConfig>& prune, BenchMode mode,
                             const Dataset& ds, const BenchOptions& opt, std::string model_id = {}) {
  using clock = std::chrono::steady_clock;
  if (mode == BenchMode::Pruned && !prune) throw ContractError("pruned benchmark needs a checkpoint with thresholds");
  if (opt.batch_size == 0 || ds.size() == 0) throw ContractError("benchmark needs a nonempty batch and dataset");
  std::optional<PrunePolicy<float>> pol;
  if (mode == BenchMode::Pruned) pol = gather_policy(*prune);
  const PrunePolicy<float>* p = pol ? &*pol : nullptr;

  BenchResult r;
  r.model_id = std::move(model_id);
  r.mode = mode;
  r.budget = prune ? prune->budget : 1.0;
  r.batch_size = opt.batch_size;
  r.latency_runs = std::max<std::size_t>(opt.latency_runs, 100);
  r.warmup = std::max<std::size_t>(opt.warmup, 10);

  std::vector<Tensor<float>> batches;
  for (std::size_t start = 0; start + opt.batch_size <= std::max(ds.size(), opt.batch_size); start += opt.batch_size) {
    std::vector<std::size_t> idx(opt.batch_size);
    for (std::size_t i = 0; i < opt.batch_size; ++i) idx[i] = (start + i) % ds.size();
    batches.push_back(ds.batch(idx));
    if (start + opt.batch_size >= ds.size()) break;
  }
  forward(batches.front(), w, p);  // warm caches and allocator
  const auto t0 = clock::now();
  std::size_t images = 0;
  for (std::size_t round = 0; round < std::max<std::size_t>(opt.throughput_rounds, 1); ++round)
    for (const auto& b : batches) {
      forward(b, w, p);
      images += opt.batch_size;
    }
  r.throughput = static_cast<double>(images) / std::chrono::duration<double>(clock::now() - t0).count();

  std::vector<Tensor<float>> singles;
  for (std::size_t i = 0; i < std::min<std::size_t>(ds.size(), r.latency_runs); ++i) {
    const std::size_t idx[1] = {i};
    singles.push_back(ds.batch(idx));
  }
  for (std::size_t i = 0; i < r.warmup; ++i) forward(singles[i % singles.size()], w, p);
  std::vector<double> ms;
  for (std::size_t i = 0; i < r.latency_runs; ++i) {
    const auto s = clock::now();
    forward(singles[i % singles.size()], w, p);
    ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - s).count());
  }
  double mean = 0, var = 0;
  for (double v : ms) mean += v;
  mean /= static_cast<double>(ms.size());
  for (double v : ms) var += (v - mean) * (v - mean);
  r.latency_mean_ms = mean;
  r.latency_std_ms = std::sqrt(var / static_cast<double>(ms.size()));

  auto ev = evaluate(w, p, ds, 1);
  r.accuracy = ev.accuracy;
  r.flops_fraction = mode == BenchMode::Dense ? 1.0 : ev.flops_fraction;
  return r;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchResult>& rows) {
  os << "model,mode,budget,flops_fraction,batch_size,throughput_img_s,latency_mean_ms,latency_std_ms,latency_runs,"
        "warmup,accuracy\n"
     << std::setprecision(9);
  for (const auto& r : rows)
    os << r.model_id << ',' << (r.mode == BenchMode::Dense ? "dense" : "pruned") << ',' << r.budget << ','
       << r.flops_fraction << ',' << r.batch_size << ',' << r.throughput << ',' << r.latency_mean_ms << ','
       << r.latency_std_ms << ',' << r.latency_runs << ',' << r.warmup << ',' << r.accuracy << '\n';
}

// ---------------------------------------------------------------------------
// Kept-token statistics

struct KeptDistribution {
  std::size_t max_tokens = 0;
  std::vector<std::vector<std::size_t>> histogram;  // [stage][kept count 0..max_tokens]

  std::size_t mass(std::size_t stage) const {
    std::size_t m = 0;
    for (auto c : histogram.at(stage)) m += c;
    return m;
  }
  double mean(std::size_t stage) const {
    double s = 0;
    for (std::size_t k = 0; k < histogram[stage].size(); ++k) s += static_cast<double>(k * histogram[stage][k]);
    return s / static_cast<double>(mass(stage));
  }
  double stddev(std::size_t stage) const {
    const double mu = mean(stage);
    double v = 0;
    for (std::size_t k = 0; k < histogram[stage].size(); ++k)
      v += static_cast<double>(histogram[stage][k]) * (static_cast<double>(k) - mu) * (static_cast<double>(k) - mu);
    return std::sqrt(v / static_cast<double>(mass(stage)));
  }
  std::size_t occupied_bins(std::size_t stage) const {
    return static_cast<std::size_t>(std::count_if(histogram[stage].begin(), histogram[stage].end(),
                                                  [](std::size_t c) { return c > 0; }));
  }
};

inline KeptDistribution kept_distribution(const EvalResult& ev, std::size_t num_patches) {
  KeptDistribution d;
  d.max_tokens = num_patches;
  const std::size_t S = ev.kept_mean.size();
  d.histogram.assign(S, std::vector<std::size_t>(num_patches + 1, 0));
  for (const auto& row : ev.kept)
    for (std::size_t s = 0; s < S; ++s) ++d.histogram[s].at(row[s]);
  return d;
}

/// Long format: one row per (stage, kept count) with a nonzero image count.
inline void write_histogram_csv(std::ostream& os, const KeptDistribution& d) {
  os << "stage,kept_tokens,images\n";
  for (std::size_t s = 0; s < d.histogram.size(); ++s)
    for (std::size_t k = 0; k < d.histogram[s].size(); ++k)
      if (d.histogram[s][k]) os << s + 1 << ',' << k << ',' << d.histogram[s][k] << '\n';
}

/// Per-image pruning schedules ranked by first-stage kept count (ascending, ties by image index).
inline void write_schedules_csv(std::ostream& os, const EvalResult& ev, const Dataset& ds, const FlopsModel& fm) {
  const std::size_t S = ev.kept_mean.size();
  std::vector<std::size_t> order(ev.kept.size());
  std::iota(order.begin(), order.end(), 0);
  if (S) std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return ev.kept[a][0] < ev.kept[b][0]; });
  os << "rank,image,label,prediction";
  for (std::size_t s = 1; s <= S; ++s) os << ",kept_" << s;
  os << ",flops_fraction\n" << std::setprecision(9);
  const double full = static_cast<double>(fm.config().num_tokens());
  for (std::size_t r = 0; r < order.size(); ++r) {
    const std::size_t i = order[r];
    os << r << ',' << i << ',' << ds.labels[i] << ',' << ev.predictions[i];
    std::vector<double> counts{full};
    for (std::size_t s = 0; s < S; ++s) {
      os << ',' << ev.kept[i][s];
      counts.push_back(static_cast<double>(ev.kept[i][s] + 1));
    }
    os << ',' << fm.fraction(counts) << '\n';
  }
}

/// Keep flags over the patch grid for one image and stage.
inline std::vector<std::uint8_t> keep_flags(const std::vector<std::size_t>& kept, std::size_t num_patches) {
  std::vector<std::uint8_t> f(num_patches, 0);
  for (auto j : kept) f.at(j) = 1;
  return f;
}

/// Text dump of every image's masks, the format shared by stats and viz.
inline void write_mask_dump(std::ostream& os, const EvalResult& ev, std::size_t grid, std::size_t first_image = 0) {
  for (std::size_t i = 0; i < ev.kept_sets.size(); ++i)
    for (std::size_t s = 0; s < ev.kept_sets[i].size(); ++s)
      write_mask_grid(os, first_image + i, s + 1, keep_flags(ev.kept_sets[i][s], grid * grid), grid);
}

/// Grey PGM of a normalised [C, H, W] image, upscaled by `zoom`, with pruned patches darkened.
inline void write_overlay_pgm(const std::filesystem::path& path, const Tensor<float>& image,
                              const std::vector<std::uint8_t>& keep, std::size_t patch, std::size_t zoom = 8) {
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2), G = W / patch;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "P5\n" << W * zoom << ' ' << H * zoom << "\n255\n";
  for (std::size_t y = 0; y < H * zoom; ++y)
    for (std::size_t x = 0; x < W * zoom; ++x) {
      const std::size_t py = y / zoom, px = x / zoom;
      double g = 0;
      for (std::size_t c = 0; c < C; ++c) g += denormalize_intensity(image[(c * H + py) * W + px]);
      g /= static_cast<double>(C);
      if (!keep[(py / patch) * G + px / patch]) g *= 0.25;
      out.put(static_cast<char>(std::lround(255.0 * g)));
    }
}

// ---------------------------------------------------------------------------
// Ablation arms evaluated on a trained checkpoint

struct AblationRow {
  std::string arm;
  std::uint64_t seed = 0;
  double accuracy = 0;
  double flops_fraction = 0;
  double flops_gap = 0;  // relative difference to the adaptive arm
  std::vector<double> kept_mean;
};

/// Selection rules compared at identical per-image, per-stage token counts taken from the
/// adaptive thresholds. Returns rows for adaptive, topk (weighted and vanilla score), random and minK.
inline std::vector<AblationRow> matched_count_arms(const ViTWeights<float>& w, const PruneConfig& p, const Dataset& ds,
                                                   std::uint64_t seed, std::size_t batch_size = 64) {
  auto adaptive = evaluate_thresholds(w, p, ds, batch_size);
  std::vector<AblationRow> rows{{"adaptive", seed, adaptive.accuracy, adaptive.flops_fraction, 0.0, adaptive.kept_mean}};
  struct ArmSpec {
    const char* name;
    MatchedArm arm;
    ScoreKind score;
  };
  const ArmSpec arms[] = {{"topk_weighted", MatchedArm::TopK, ScoreKind::HeadWeighted},
                          {"topk_vanilla", MatchedArm::TopK, ScoreKind::Vanilla},
                          {"random", MatchedArm::Random, p.score},
                          {"mink", MatchedArm::MinK, p.score}};
  for (const auto& a : arms) {
    auto rng = std::make_shared<std::mt19937_64>(seed);
    PruneConfig cfg = p;
    cfg.score = a.score;
    PrunePolicy<float> pol{cfg, ExecMode::Masked, {}, {}};
    auto policy_for = [&](std::size_t start, std::size_t count) {
      std::vector<std::vector<std::size_t>> counts(adaptive.kept.begin() + static_cast<std::ptrdiff_t>(start),
                                                   adaptive.kept.begin() + static_cast<std::ptrdiff_t>(start + count));
      pol.masked = count_matched_selector<float>(std::move(counts), a.arm, rng);
      return const_cast<const PrunePolicy<float>*>(&pol);
    };
    auto ev = evaluate_batches(w, policy_for, p.num_stages(), p.locations, ds, batch_size);
    rows.push_back({a.name, seed, ev.accuracy, ev.flops_fraction,
                    (ev.flops_fraction - adaptive.flops_fraction) / adaptive.flops_fraction, ev.kept_mean});
  }
  return rows;
}

/// Fixed keep-ratio baseline with the ratio bisected until its cost matches `target_fraction`.
inline AblationRow fixed_ratio_arm(const ViTWeights<float>& w, const PruneConfig& p, const Dataset& ds,
                                   double target_fraction, std::uint64_t seed, std::size_t batch_size = 64) {
  const FlopsModel fm(w.cfg, p.locations);
  const std::size_t N = w.cfg.num_patches();
  auto frac_of = [&](double rho) {  // deterministic: counts depend only on rho
    std::vector<double> counts{static_cast<double>(N + 1)};
    std::size_t alive = N;
    for (std::size_t s = 0; s < p.num_stages(); ++s) {
      alive = ratio_keep_count(alive, rho);
      counts.push_back(static_cast<double>(alive + 1));
    }
    return fm.fraction(counts);
  };
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    (frac_of(mid) < target_fraction ? lo : hi) = mid;
  }
  const double rho = std::abs(frac_of(lo) - target_fraction) <= std::abs(frac_of(hi) - target_fraction) ? lo : hi;
  PrunePolicy<float> pol{p, ExecMode::Masked, ratio_masked_selector<float>(rho), {}};
  auto ev = evaluate(w, &pol, ds, batch_size);
  return {"fixed_ratio_topk", seed, ev.accuracy, ev.flops_fraction,
          (ev.flops_fraction - target_fraction) / target_fraction, ev.kept_mean};
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows, std::size_t stages) {
  os << "arm,seed,accuracy,flops_fraction,flops_gap";
  for (std::size_t s = 1; s <= stages; ++s) os << ",kept_mean_" << s;
  os << '\n' << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.arm << ',' << r.seed << ',' << r.accuracy << ',' << r.flops_fraction << ',' << r.flops_gap;
    for (double k : r.kept_mean) os << ',' << k;
    os << '\n';
  }
}

/// Thread count requested through ASVIT_NUM_THREADS (default 1). Kernels here are single
/// threaded; the value is recorded in manifests and bounds any parallel evaluation.
inline std::size_t requested_threads() {
  if (const char* v = std::getenv("ASVIT_NUM_THREADS")) {
    const long n = std::strtol(v, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

}  // namespace asvit
