#pragma once

#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "asvit/checkpoint.hpp"
#include "asvit/config.hpp"
#include "asvit/data.hpp"
#include "asvit/flops.hpp"
#include "asvit/losses.hpp"
#include "asvit/optim.hpp"
#include "asvit/vit.hpp"

namespace asvit {

struct TrainingDiverged : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Pruning state stored alongside the weights

inline NamedTensors prune_tensors(const PruneConfig& p) {
  const std::size_t S = p.num_stages();
  Tensor<float> loc({S}), th({S});
  for (std::size_t s = 0; s < S; ++s) {
    loc[s] = static_cast<float>(p.locations[s]);
    th[s] = static_cast<float>(p.thresholds[s]);
  }
  Tensor<float> misc = Tensor<float>::vector({static_cast<float>(p.score == ScoreKind::Vanilla),
                                              static_cast<float>(p.mask_strategy == MaskStrategy::Activation),
                                              static_cast<float>(p.temperature), static_cast<float>(p.budget)});
  return {{"asm.locations", loc}, {"asm.thresholds", th}, {"asm.options", misc}};
}

/// Pruning configuration saved with a checkpoint, or nullopt for a dense model.
inline std::optional<PruneConfig> prune_config_from(const Checkpoint& ck) {
  const auto* loc = ck.find("asm.locations");
  const auto* th = ck.find("asm.thresholds");
  if (!loc && !th) return std::nullopt;
  if (!loc || !th || loc->size() != th->size()) throw CheckpointError("checkpoint has inconsistent asm.* tensors");
  PruneConfig p;
  p.locations.clear();
  p.thresholds.clear();
  for (std::size_t s = 0; s < loc->size(); ++s) {
    p.locations.push_back(static_cast<std::size_t>((*loc)[s]));
    p.thresholds.push_back((*th)[s]);
  }
  if (const auto* misc = ck.find("asm.options"); misc && misc->size() >= 3) {
    p.score = (*misc)[0] != 0 ? ScoreKind::Vanilla : ScoreKind::HeadWeighted;
    p.mask_strategy = (*misc)[1] != 0 ? MaskStrategy::Activation : MaskStrategy::Attention;
    p.temperature = (*misc)[2];
    if (misc->size() >= 4) p.budget = std::round((*misc)[3] * 1e6) / 1e6;  // stored as float
  }
  try {
    p.validate(ck.config.num_layers);
  } catch (const Error& e) {
    throw CheckpointError(std::string("checkpoint pruning state invalid: ") + e.what());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double accuracy = 0;        // percent
  double flops_fraction = 1;  // mean over images
  std::vector<double> kept_mean;                    // per stage, image tokens kept
  std::vector<std::vector<std::size_t>> kept;       // [image][stage] image tokens kept
  std::vector<std::vector<std::vector<std::size_t>>> kept_sets;  // [image][stage] patch indices (when requested)
  std::vector<int> predictions;
  std::size_t safeguard_events = 0;
};

inline int argmax_row(const Tensor<float>& logits, std::size_t row) {
  const std::size_t C = logits.dim(-1);
  const float* r = logits.data() + row * C;
  return static_cast<int>(std::max_element(r, r + C) - r);
}

/// Supplies the policy for the images [start, start + count); null means dense.
using BatchPolicy = std::function<const PrunePolicy<float>*(std::size_t start, std::size_t count)>;

/// Runs the model over the whole dataset in batches and aggregates accuracy, cost and per-stage
/// kept counts. With threads > 1, batches are sharded over workers that share the read-only
/// weights; `policy_for` must then be safe to call concurrently. Results are merged in batch
/// order, so they do not depend on the thread count.
inline EvalResult evaluate_batches(const ViTWeights<float>& w, const BatchPolicy& policy_for, std::size_t stages,
                                   const std::vector<std::size_t>& locations, const Dataset& ds,
                                   std::size_t batch_size, bool keep_sets = false, std::size_t threads = 1) {
  struct BatchOut {
    std::vector<int> predictions;
    std::vector<std::vector<std::size_t>> kept;
    std::vector<std::vector<std::vector<std::size_t>>> sets;
    std::size_t safeguard = 0;
  };
  const std::size_t nb = (ds.size() + batch_size - 1) / batch_size;
  std::vector<BatchOut> outs(nb);
  auto run = [&](std::size_t bi) {
    const std::size_t start = bi * batch_size;
    std::vector<std::size_t> idx(std::min(batch_size, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto out = forward(ds.batch(idx), w, policy_for(start, idx.size()));
    if (out.trace.stages.size() != stages) throw ContractError("evaluate: policy stage count mismatch");
    BatchOut& o = outs[bi];
    for (std::size_t b = 0; b < idx.size(); ++b) {
      o.predictions.push_back(argmax_row(out.logits.value(), b));
      std::vector<std::size_t> kept;
      std::vector<std::vector<std::size_t>> sets;
      for (const auto& st : out.trace.stages) {
        kept.push_back(st.kept[b].size());
        if (keep_sets) sets.push_back(st.kept[b]);
      }
      o.kept.push_back(std::move(kept));
      if (keep_sets) o.sets.push_back(std::move(sets));
    }
    for (const auto& st : out.trace.stages) o.safeguard += st.safeguard_events;
  };
  if (threads <= 1 || nb <= 1) {
    for (std::size_t bi = 0; bi < nb; ++bi) run(bi);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          for (std::size_t bi; (bi = next++) < nb;) run(bi);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  const std::size_t N = w.cfg.num_patches();
  FlopsModel fm(w.cfg, locations);
  EvalResult r;
  r.kept_mean.assign(stages, 0.0);
  std::size_t correct = 0;
  double flops = 0;
  for (auto& o : outs) {
    for (std::size_t b = 0; b < o.predictions.size(); ++b) {
      const std::size_t i = r.predictions.size();
      r.predictions.push_back(o.predictions[b]);
      correct += o.predictions[b] == ds.labels[i];
      std::vector<double> counts{static_cast<double>(N + 1)};
      for (std::size_t s = 0; s < stages; ++s) {
        counts.push_back(static_cast<double>(o.kept[b][s] + 1));
        r.kept_mean[s] += static_cast<double>(o.kept[b][s]);
      }
      flops += fm.fraction(counts);
      r.kept.push_back(std::move(o.kept[b]));
      if (keep_sets) r.kept_sets.push_back(std::move(o.sets[b]));
    }
    r.safeguard_events += o.safeguard;
  }
  const double n = static_cast<double>(ds.size());
  r.accuracy = 100.0 * static_cast<double>(correct) / n;
  r.flops_fraction = flops / n;
  for (auto& k : r.kept_mean) k /= n;
  return r;
}

/// Evaluates one fixed policy (dense when null).
inline EvalResult evaluate(const ViTWeights<float>& w, const PrunePolicy<float>* policy, const Dataset& ds,
                           std::size_t batch_size, bool keep_sets = false, std::size_t threads = 1) {
  return evaluate_batches(
      w, [policy](std::size_t, std::size_t) { return policy; }, policy ? policy->config.num_stages() : 0,
      policy ? policy->config.locations : std::vector<std::size_t>{}, ds, batch_size, keep_sets, threads);
}

/// Masked evaluation with hard thresholds, the mode used while training.
inline EvalResult evaluate_thresholds(const ViTWeights<float>& w, const PruneConfig& p, const Dataset& ds,
                                      std::size_t batch_size, bool keep_sets = false, std::size_t threads = 1) {
  std::vector<float> th(p.thresholds.begin(), p.thresholds.end());
  PrunePolicy<float> pol{p, ExecMode::Masked, hard_threshold_selector<float>(th), {}};
  return evaluate(w, &pol, ds, batch_size, keep_sets, threads);
}

// ---------------------------------------------------------------------------
// Training loops

struct EpochMetrics {
  std::size_t epoch = 0;
  double accuracy = 0;
  double flops_fraction = 1;
  std::vector<double> thresholds;
  std::vector<double> kept_mean;
  double train_loss = 0;
};

struct TrainResult {
  ViTWeights<float> weights;
  PruneConfig prune;  // thresholds hold the learned values
  bool pruned = false;
  std::vector<EpochMetrics> history;
  std::vector<std::vector<double>> threshold_trajectory;  // one row per optimisation step
};

/// Per-epoch CSV: epoch, acc, flops_fraction, theta_1..theta_S, kept_mean_1..kept_mean_S.
inline void write_metrics_csv(std::ostream& os, const std::vector<EpochMetrics>& rows, std::size_t stages) {
  os << "epoch,acc,flops_fraction";
  for (std::size_t s = 1; s <= stages; ++s) os << ",theta_" << s;
  for (std::size_t s = 1; s <= stages; ++s) os << ",kept_mean_" << s;
  os << '\n' << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.accuracy << ',' << r.flops_fraction;
    for (double t : r.thresholds) os << ',' << t;
    for (double k : r.kept_mean) os << ',' << k;
    os << '\n';
  }
}

namespace train_detail {

// Decay matrices only; biases, norms, the class token and position table are exempt.
inline bool decays(const std::string& name) {
  if (name == "pos_embed" || name == "cls_token") return false;
  if (name.find("norm") != std::string::npos) return false;
  return name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

inline AdamW<float> weight_optimizer(const ViTWeights<float>& w, double weight_decay) {
  typename AdamW<float>::Group decay{{}, weight_decay}, plain{{}, 0.0};
  for (const auto& [name, v] : w.named()) (decays(name) ? decay : plain).params.push_back(*v);
  return AdamW<float>({decay, plain});
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline void log_epoch(std::ostream* log, const char* tag, const EpochMetrics& m) {
  if (!log) return;
  *log << tag << " epoch " << m.epoch << " loss " << std::setprecision(5) << m.train_loss << " acc " << m.accuracy
       << " flops " << m.flops_fraction;
  for (double t : m.thresholds) *log << " theta " << t;
  for (double k : m.kept_mean) *log << " kept " << k;
  *log << std::endl;
}

}  // namespace train_detail

/// Geometric ramp from `start` (clamped to at most `end`) to `end` over the run.
inline double annealed_temperature(std::size_t step, std::size_t total_steps, double start, double end) {
  start = std::min(start, end);
  if (total_steps <= 1) return end;
  const double t = static_cast<double>(std::min(step, total_steps - 1)) / static_cast<double>(total_steps - 1);
  return start * std::pow(end / start, t);
}

/// Dense training from scratch with cross-entropy; produces the teacher.
inline TrainResult pretrain(const RunConfig& rc, const Dataset& train, const Dataset& eval, std::ostream* log = nullptr) {
  const auto& tc = rc.train;
  std::mt19937_64 rng(tc.seed);
  TrainResult res{ViTWeights<float>::init(rc.model, rng), rc.prune, false, {}, {}};
  auto opt = train_detail::weight_optimizer(res.weights, tc.weight_decay);
  const std::size_t steps_per_epoch = (train.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t total = steps_per_epoch * tc.epochs;
  const std::size_t warmup = std::min(total / 10, 2 * steps_per_epoch);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto order = train_detail::epoch_order(train.size(), rng);
    double loss_sum = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::span<const std::size_t> idx(order.data() + s * tc.batch_size,
                                       std::min(tc.batch_size, train.size() - s * tc.batch_size));
      GradTape<float> tape;
      auto out = forward(train.batch(idx), res.weights);
      auto loss = cross_entropy(out.logits, train.batch_labels(idx));
      const double lv = loss.value().item();
      if (!std::isfinite(lv))
        throw TrainingDiverged("pretrain: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                               std::to_string(s));
      loss_sum += lv;
      opt.zero_grad();
      tape.backward(loss);
      opt.step(warmup_cosine_lr(step++, warmup, total, tc.lr, tc.min_lr));
    }
    auto ev = evaluate(res.weights, nullptr, eval, 64);
    EpochMetrics m{epoch, ev.accuracy, 1.0, {}, {}, loss_sum / static_cast<double>(steps_per_epoch)};
    train_detail::log_epoch(log, "pretrain", m);
    res.history.push_back(m);
  }
  return res;
}

/// Dense logits of `model` for every image, computed once (the teacher is frozen).
inline Tensor<float> cached_logits(const ViTWeights<float>& model, const Dataset& ds, std::size_t batch = 64) {
  const std::size_t C = model.cfg.num_classes;
  Tensor<float> all({ds.size(), C});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    idx.resize(std::min(batch, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto out = forward(ds.batch(idx), model);
    std::copy_n(out.logits.value().data(), idx.size() * C, all.data() + start * C);
  }
  return all;
}

/// Budget-aware fine-tuning of thresholds (and, unless frozen, the backbone) starting from the
/// teacher, with CE + lambda_flops * budget + lambda_distill * KL(teacher || student).
inline TrainResult finetune(const RunConfig& rc, const ViTWeights<float>& teacher, const Dataset& train,
                            const Dataset& eval, std::ostream* log = nullptr) {
  const auto& tc = rc.train;
  const auto& pc = rc.prune;
  pc.validate(teacher.cfg.num_layers);
  if (!(teacher.cfg == rc.model)) throw ConfigError("teacher checkpoint does not match the configured model shape");
  std::mt19937_64 rng(tc.seed);
  TrainResult res{teacher.clone(), pc, true, {}, {}};
  auto& student = res.weights;
  const std::size_t S = pc.num_stages();

  std::vector<Var<float>> thetas;
  for (double t : pc.thresholds) thetas.push_back(Var<float>::param(Tensor<float>::scalar(static_cast<float>(t))));
  AdamW<float> theta_opt({{thetas, 0.0}});
  auto weight_opt = train_detail::weight_optimizer(student, tc.weight_decay);
  if (tc.freeze_backbone)
    for (auto& p : student.parameters()) p.node()->requires_grad = false;

  float temperature = 0;
  PrunePolicy<float> policy{pc, ExecMode::Masked,
                            [&](std::size_t stage, const Var<float>& scores, const Tensor<float>&) {
                              return ste_mask(scores, thetas.at(stage), temperature);
                            },
                            {}};
  const FlopsModel fm(rc.model, pc.locations);
  const double dense = fm.dense();
  const float full = static_cast<float>(rc.model.num_tokens());
  Tensor<float> teacher_logits;
  if (tc.lambda_distill > 0) teacher_logits = cached_logits(teacher, train);
  const std::size_t C = rc.model.num_classes;

  const std::size_t steps_per_epoch = (train.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t total = steps_per_epoch * tc.epochs;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto order = train_detail::epoch_order(train.size(), rng);
    double loss_sum = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::span<const std::size_t> idx(order.data() + s * tc.batch_size,
                                       std::min(tc.batch_size, train.size() - s * tc.batch_size));
      const std::size_t B = idx.size();
      temperature = static_cast<float>(annealed_temperature(step, total, pc.temperature_start, pc.temperature));
      GradTape<float> tape;
      auto out = forward(train.batch(idx), student, &policy);
      auto ce = cross_entropy(out.logits, train.batch_labels(idx));

      std::vector<Var<float>> counts{Var<float>::constant(Tensor<float>({B}, full))};
      for (const auto& st : out.trace.stages) counts.push_back(st.kept_tokens);
      auto batch_flops = flops_of_batch(stack_lastdim(counts), fm);
      auto budget = budget_loss(batch_flops, dense, pc.budget);

      Var<float> distill;
      if (tc.lambda_distill > 0) {
        Tensor<float> t({B, C});
        for (std::size_t b = 0; b < B; ++b) std::copy_n(teacher_logits.data() + idx[b] * C, C, t.data() + b * C);
        distill = distill_loss(out.logits, Var<float>::constant(std::move(t)), tc.kl_direction);
      }
      auto loss = total_loss(ce, budget, distill, tc);

      const double lv = loss.value().item();
      double frac = 0;
      for (float f : batch_flops.value().values()) frac += f;
      frac /= static_cast<double>(B) * dense;
      if (!std::isfinite(lv) || !(frac > 0 && frac <= 1 + 1e-6)) {
        std::ostringstream msg;
        msg << "finetune diverged at epoch " << epoch << " step " << s << ": loss " << lv << " (ce "
            << ce.value().item() << ", budget " << budget.value().item() << ") flops fraction " << frac
            << " thresholds";
        for (auto& t : thetas) msg << ' ' << t.value().item();
        throw TrainingDiverged(msg.str());
      }
      loss_sum += lv;

      weight_opt.zero_grad();
      theta_opt.zero_grad();
      tape.backward(loss);
      const double decay = cosine_lr(step, total, 1.0, tc.min_lr / tc.lr);
      if (!tc.freeze_backbone) weight_opt.step(tc.lr * decay);
      theta_opt.step(tc.threshold_lr * decay);
      ++step;
      std::vector<double> row;
      for (auto& t : thetas) row.push_back(t.value().item());
      res.threshold_trajectory.push_back(row);
    }
    for (std::size_t k = 0; k < S; ++k) res.prune.thresholds[k] = thetas[k].value().item();
    auto ev = evaluate_thresholds(student, res.prune, eval, 64);
    EpochMetrics m{epoch, ev.accuracy, ev.flops_fraction, res.prune.thresholds, ev.kept_mean,
                   loss_sum / static_cast<double>(steps_per_epoch)};
    train_detail::log_epoch(log, "finetune", m);
    res.history.push_back(m);
  }
  if (tc.freeze_backbone)
    for (auto& p : student.parameters()) p.node()->requires_grad = true;
  return res;
}

}  // namespace asvit
