#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "asvit/asvit.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace asvit;

namespace {

std::string fnv1a_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char c;
  while (in.get(c)) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ull;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct Run {
  std::vector<std::string> argv;
  std::size_t threads = 1;
};

// Everything needed to redo the run: command line, resolved config and its hash, seeds, inputs
// with content hashes, and the toolchain. Results are bitwise reproducible with threads = 1.
void write_manifest(const fs::path& dir, const Run& run, const std::string& verb, json extra) {
  json m;
  m["tool"] = "asvit";
  m["version"] = kVersion;
  m["verb"] = verb;
  m["argv"] = run.argv;
  m["threads"] = run.threads;
  m["compiler"] = __VERSION__;
  m["cplusplus"] = __cplusplus;
  m["libraries"] = {{"CLI11", CLI11_VERSION},
                    {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                          std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                          std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  m["checkpoint_format"] = kCheckpointVersion;
  m.update(extra);
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

json config_json(const KeyValueFile& kv) {
  json c = json::object();
  for (const auto& [k, v] : kv.entries()) c[k] = v;
  return c;
}

json input_json(const fs::path& p) { return {{"path", p.string()}, {"fnv1a", fnv1a_file(p)}}; }

KeyValueFile load_config(const std::string& path, const std::vector<std::string>& overrides) {
  auto kv = KeyValueFile::load(path);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    kv.set(config_detail::trim(o.substr(0, eq)), config_detail::trim(o.substr(eq + 1)));
  }
  return kv;
}

struct DataOptions {
  std::string dataset = "synthetic";
  std::size_t eval_size = 500;
  std::uint64_t data_seed = 7;

  void add_to(CLI::App* app) {
    app->add_option("--dataset", dataset, "synthetic or cifar10:<dir>")->capture_default_str();
    app->add_option("--eval-size", eval_size, "Images from the evaluation split")->capture_default_str();
    app->add_option("--data-seed", data_seed, "Seed of the synthetic splits")->capture_default_str();
  }
  Dataset load(const ModelConfig& m) const {
    return load_dataset(dataset, Split::Eval, eval_size, data_seed, m.image_size, static_cast<int>(m.num_classes));
  }
  json to_json() const { return {{"dataset", dataset}, {"eval_size", eval_size}, {"data_seed", data_seed}}; }
};

struct LoadedModel {
  ViTWeights<float> weights;
  std::optional<PruneConfig> prune;
};

LoadedModel load_model(const fs::path& p) {
  auto ck = read_checkpoint(p);
  return {weights_from(ck), prune_config_from(ck)};
}

// Dense checkpoints are analysed with all-keep thresholds at the default locations.
PruneConfig prune_or_keep_all(const LoadedModel& m) {
  if (m.prune) return *m.prune;
  PruneConfig p;
  std::vector<std::size_t> locs;
  for (auto l : p.locations)
    if (l < m.weights.cfg.num_layers) locs.push_back(l);
  if (locs.empty()) locs.push_back(m.weights.cfg.num_layers - 1);
  p.locations = locs;
  p.thresholds.assign(locs.size(), -1.0);
  return p;
}

// ---------------------------------------------------------------------------

int cmd_train(const Run& run, const std::string& config, const std::vector<std::string>& overrides) {
  const auto kv = load_config(config, overrides);
  const auto rc = run_config_from(kv);
  const auto& tc = rc.train;
  const fs::path out = tc.out_dir;
  fs::create_directories(out);
  const auto& m = rc.model;
  const int classes = static_cast<int>(m.num_classes);
  auto train = load_dataset(tc.dataset, Split::Train, tc.train_size, tc.data_seed, m.image_size, classes);
  auto eval = load_dataset(tc.dataset, Split::Eval, tc.eval_size, tc.data_seed, m.image_size, classes);

  json extra{{"config_hash", kv.hash()}, {"config", config_json(kv)}, {"seed", tc.seed}};
  TrainResult res;
  if (tc.mode == TrainMode::Pretrain) {
    res = pretrain(rc, train, eval, &std::cout);
    write_checkpoint(out / "model.asvt", checkpoint_of(res.weights));
  } else {
    auto teacher = load_model(tc.teacher);
    extra["inputs"] = {{"teacher", input_json(tc.teacher)}};
    res = finetune(rc, teacher.weights, train, eval, &std::cout);
    write_checkpoint(out / "model.asvt", checkpoint_of(res.weights, prune_tensors(res.prune)));
    std::ofstream traj(out / "thresholds.csv");
    traj << "step";
    for (std::size_t s = 1; s <= res.prune.num_stages(); ++s) traj << ",theta_" << s;
    traj << '\n' << std::setprecision(9);
    for (std::size_t i = 0; i < res.threshold_trajectory.size(); ++i) {
      traj << i + 1;
      for (double t : res.threshold_trajectory[i]) traj << ',' << t;
      traj << '\n';
    }
  }
  std::ofstream metrics(out / "metrics.csv");
  write_metrics_csv(metrics, res.history, res.pruned ? res.prune.num_stages() : 0);
  write_manifest(out, run, "train", extra);
  std::cout << "wrote " << (out / "model.asvt").string() << '\n';
  return 0;
}

int cmd_bench(const Run& run, const std::string& checkpoint, const std::vector<std::string>& modes,
              const BenchOptions& opt, const DataOptions& data, const fs::path& out) {
  auto model = load_model(checkpoint);
  auto ds = data.load(model.weights.cfg);
  std::vector<BenchResult> rows;
  for (const auto& mode : modes) {
    const BenchMode bm = mode == "dense" ? BenchMode::Dense : BenchMode::Pruned;
    if (bm == BenchMode::Pruned && !model.prune) throw ContractError(checkpoint + " holds no pruning thresholds");
    rows.push_back(run_bench(model.weights, model.prune, bm, ds, opt, fs::path(checkpoint).stem().string()));
    const auto& r = rows.back();
    std::cout << mode << ": " << std::fixed << std::setprecision(1) << r.throughput << " img/s at batch "
              << r.batch_size << ", latency " << std::setprecision(3) << r.latency_mean_ms << " +- "
              << r.latency_std_ms << " ms, flops " << r.flops_fraction << ", acc " << std::setprecision(2)
              << r.accuracy << '\n'
              << std::defaultfloat;
  }
  if (rows.size() == 2) std::cout << "speedup " << rows[1].throughput / rows[0].throughput << "x\n";
  fs::create_directories(out);
  std::ofstream csv(out / "bench.csv");
  write_bench_csv(csv, rows);
  json extra{{"seed", data.data_seed}, {"data", data.to_json()}, {"inputs", {{"checkpoint", input_json(checkpoint)}}},
             {"batch_size", opt.batch_size}, {"throughput_rounds", opt.throughput_rounds},
             {"latency_runs", opt.latency_runs}, {"warmup", opt.warmup}};
  write_manifest(out, run, "bench", extra);
  return 0;
}

int cmd_stats(const Run& run, const std::string& checkpoint, const DataOptions& data, std::size_t batch,
              const fs::path& out) {
  auto model = load_model(checkpoint);
  const auto& cfg = model.weights.cfg;
  const auto p = prune_or_keep_all(model);
  auto ds = data.load(cfg);
  auto ev = evaluate_thresholds(model.weights, p, ds, batch, true, run.threads);
  auto dist = kept_distribution(ev, cfg.num_patches());

  fs::create_directories(out);
  std::ofstream hist(out / "histogram.csv");
  write_histogram_csv(hist, dist);
  std::ofstream sched(out / "schedules.csv");
  write_schedules_csv(sched, ev, ds, FlopsModel(cfg, p.locations));
  std::ofstream masks(out / "masks.txt");
  write_mask_dump(masks, ev, cfg.grid());
  std::ofstream summary(out / "summary.csv");
  summary << "stage,location,images,kept_mean,kept_stddev,occupied_bins\n" << std::setprecision(9);
  std::cout << "accuracy " << ev.accuracy << "  flops fraction " << ev.flops_fraction << '\n';
  for (std::size_t s = 0; s < p.num_stages(); ++s) {
    summary << s + 1 << ',' << p.locations[s] << ',' << dist.mass(s) << ',' << dist.mean(s) << ','
            << dist.stddev(s) << ',' << dist.occupied_bins(s) << '\n';
    std::cout << "stage " << s + 1 << ": kept " << dist.mean(s) << " +- " << dist.stddev(s) << " over "
              << dist.occupied_bins(s) << " distinct counts\n";
  }
  json extra{{"seed", data.data_seed}, {"data", data.to_json()}, {"inputs", {{"checkpoint", input_json(checkpoint)}}}};
  write_manifest(out, run, "stats", extra);
  return 0;
}

int cmd_viz(const Run& run, const std::string& checkpoint, const std::string& image, std::optional<std::size_t> index,
            const DataOptions& data, std::size_t zoom, const fs::path& out) {
  auto model = load_model(checkpoint);
  const auto& cfg = model.weights.cfg;
  const auto p = prune_or_keep_all(model);
  Dataset one;
  std::size_t shown = 0;
  json extra{{"inputs", {{"checkpoint", input_json(checkpoint)}}}};
  if (!image.empty()) {
    auto img = read_netpbm(image);
    if (img.dim(1) != cfg.image_size || img.dim(2) != cfg.image_size)
      throw DataError(image + " is " + std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(1)) + ", model expects " +
                      std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
    one = Dataset{img.reshaped({1, 3, cfg.image_size, cfg.image_size}), {0}};
    extra["inputs"]["image"] = input_json(image);
  } else {
    shown = index.value_or(0);
    DataOptions d = data;
    d.eval_size = std::max(d.eval_size, shown + 1);
    auto ds = d.load(cfg);
    const std::size_t idx[1] = {shown};
    one = Dataset{ds.batch(idx), {ds.labels[shown]}};
    extra["data"] = d.to_json();
    extra["seed"] = d.data_seed;
    extra["index"] = shown;
  }
  auto ev = evaluate_thresholds(model.weights, p, one, 1, true);

  fs::create_directories(out);
  const auto img = one.image(0);
  write_overlay_pgm(out / "stage_0.pgm", img, std::vector<std::uint8_t>(cfg.num_patches(), 1), cfg.patch_size, zoom);
  for (std::size_t s = 0; s < p.num_stages(); ++s) {
    const auto keep = keep_flags(ev.kept_sets[0][s], cfg.num_patches());
    write_overlay_pgm(out / ("stage_" + std::to_string(s + 1) + ".pgm"), img, keep, cfg.patch_size, zoom);
  }
  std::ofstream masks(out / "masks.txt");
  write_mask_dump(masks, ev, cfg.grid(), shown);
  std::cout << "prediction " << ev.predictions[0] << ", kept per stage";
  for (auto k : ev.kept[0]) std::cout << ' ' << k;
  std::cout << " of " << cfg.num_patches() << '\n';
  write_manifest(out, run, "viz", extra);
  return 0;
}

struct AblateOptions {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> variants{"vanilla", "activation", "no_distill", "locations"};
  std::vector<std::size_t> alt_locations{3, 6, 9};
  std::size_t eval_batch = 64;
};

int cmd_ablate(const Run& run, const std::string& config, const std::vector<std::string>& overrides,
               const AblateOptions& opt, const std::string& out_dir) {
  const auto kv = load_config(config, overrides);
  const auto base = run_config_from(kv);
  if (base.train.mode != TrainMode::Finetune) throw ConfigError("ablate needs a finetune config");
  const auto& tc = base.train;
  const auto& m = base.model;
  const int classes = static_cast<int>(m.num_classes);
  auto train = load_dataset(tc.dataset, Split::Train, tc.train_size, tc.data_seed, m.image_size, classes);
  auto eval = load_dataset(tc.dataset, Split::Eval, tc.eval_size, tc.data_seed, m.image_size, classes);
  auto teacher = load_model(tc.teacher).weights;
  const std::size_t S = base.prune.num_stages();
  if (opt.alt_locations.size() != S) throw ConfigError("--locations needs " + std::to_string(S) + " entries");

  std::vector<AblationRow> rows;
  for (auto seed : opt.seeds) {
    auto rc = base;
    rc.train.seed = seed;
    std::cout << "seed " << seed << ": adaptive\n";
    auto res = finetune(rc, teacher, train, eval, &std::cout);
    auto arms = matched_count_arms(res.weights, res.prune, eval, seed, opt.eval_batch);
    const double adaptive_flops = arms.front().flops_fraction;
    arms.push_back(fixed_ratio_arm(res.weights, res.prune, eval, adaptive_flops, seed, opt.eval_batch));
    for (auto& v : opt.variants) {
      auto vc = rc;
      if (v == "vanilla")
        vc.prune.score = ScoreKind::Vanilla;
      else if (v == "activation")
        vc.prune.mask_strategy = MaskStrategy::Activation;
      else if (v == "no_distill")
        vc.train.lambda_distill = 0;
      else if (v == "locations")
        vc.prune.locations = opt.alt_locations;
      else
        throw ConfigError("unknown ablation variant '" + v + "'");
      std::cout << "seed " << seed << ": variant " << v << '\n';
      auto vr = finetune(vc, teacher, train, eval, &std::cout);
      auto ev = evaluate_thresholds(vr.weights, vr.prune, eval, opt.eval_batch);
      arms.push_back({"variant_" + v, seed, ev.accuracy, ev.flops_fraction,
                      (ev.flops_fraction - adaptive_flops) / adaptive_flops, ev.kept_mean});
    }
    for (const auto& r : arms)
      std::cout << "  " << std::left << std::setw(22) << r.arm << std::right << " acc " << std::setw(6) << r.accuracy
                << "  flops " << r.flops_fraction << '\n';
    rows.insert(rows.end(), arms.begin(), arms.end());
  }

  const fs::path out = out_dir.empty() ? fs::path(tc.out_dir) : fs::path(out_dir);
  fs::create_directories(out);
  std::ofstream csv(out / "ablation.csv");
  write_ablation_csv(csv, rows, S);
  json extra{{"config_hash", kv.hash()}, {"config", config_json(kv)}, {"seeds", opt.seeds},
             {"variants", opt.variants}, {"alt_locations", opt.alt_locations},
             {"inputs", {{"teacher", input_json(tc.teacher)}}}};
  write_manifest(out, run, "ablate", extra);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Budget-aware adaptive token pruning for vision transformers"};
  app.require_subcommand(1);
  Run run;
  run.argv.assign(argv, argv + argc);
  app.add_option("--threads", run.threads, "Evaluation workers (timing loops stay single threaded)")
      ->envname("ASVIT_NUM_THREADS")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  std::function<int()> action;

  auto* train = app.add_subcommand("train", "Pretrain a dense model or fine-tune thresholds under a budget");
  std::string config;
  std::vector<std::string> overrides;
  train->add_option("config", config, "key = value config file")->required()->check(CLI::ExistingFile);
  train->add_option("--set", overrides, "Override a config entry, key=value (repeatable)");
  train->callback([&] { action = [&] { return cmd_train(run, config, overrides); }; });

  auto* bench = app.add_subcommand("bench", "Throughput and batch-1 latency, dense and/or pruned");
  std::string checkpoint, out_dir = ".";
  std::vector<std::string> modes{"dense", "pruned"};
  BenchOptions bopt;
  DataOptions data;
  bench->add_option("checkpoint", checkpoint, "Model file")->required()->check(CLI::ExistingFile);
  bench->add_option("--mode", modes, "dense, pruned or both")
      ->check(CLI::IsMember({"dense", "pruned"}))
      ->delimiter(',')
      ->capture_default_str();
  bench->add_option("--batch-size", bopt.batch_size, "Throughput batch size")->capture_default_str();
  bench->add_option("--rounds", bopt.throughput_rounds, "Timed passes over the batches")->capture_default_str();
  bench->add_option("--latency-runs", bopt.latency_runs, "Batch-1 timings (at least 100)")->capture_default_str();
  bench->add_option("--warmup", bopt.warmup, "Untimed batch-1 runs (at least 10)")->capture_default_str();
  bench->add_option("--out-dir", out_dir, "Where bench.csv and manifest.json go")->capture_default_str();
  data.add_to(bench);
  bench->callback([&] { action = [&] { return cmd_bench(run, checkpoint, modes, bopt, data, out_dir); }; });

  auto* stats = app.add_subcommand("stats", "Kept-token histograms and per-image pruning schedules");
  std::size_t eval_batch = 64;
  stats->add_option("checkpoint", checkpoint, "Model file")->required()->check(CLI::ExistingFile);
  stats->add_option("--batch-size", eval_batch, "Evaluation batch size")->capture_default_str();
  stats->add_option("--out-dir", out_dir)->capture_default_str();
  data.add_to(stats);
  stats->callback([&] { action = [&] { return cmd_stats(run, checkpoint, data, eval_batch, out_dir); }; });

  auto* viz = app.add_subcommand("viz", "Per-stage overlays (PGM) and mask grids for one image");
  std::string image;
  std::optional<std::size_t> index;
  std::size_t zoom = 8;
  viz->add_option("checkpoint", checkpoint, "Model file")->required()->check(CLI::ExistingFile);
  auto* img_opt = viz->add_option("--image", image, "Binary PGM/PPM at the model resolution")->check(CLI::ExistingFile);
  viz->add_option("--index", index, "Evaluation-set image instead of --image")->excludes(img_opt);
  viz->add_option("--zoom", zoom, "Pixel upscaling of the overlays")->capture_default_str();
  viz->add_option("--out-dir", out_dir)->capture_default_str();
  data.add_to(viz);
  viz->callback([&] { action = [&] { return cmd_viz(run, checkpoint, image, index, data, zoom, out_dir); }; });

  auto* ablate = app.add_subcommand("ablate", "Selection-rule arms at matched cost plus retrained variants");
  AblateOptions aopt;
  std::string ablate_out;
  ablate->add_option("config", config, "Finetune config")->required()->check(CLI::ExistingFile);
  ablate->add_option("--set", overrides, "Override a config entry, key=value (repeatable)");
  ablate->add_option("--seeds", aopt.seeds, "Training seeds")->delimiter(',')->capture_default_str();
  ablate->add_option("--variants", aopt.variants, "Retrained variants: vanilla, activation, no_distill, locations")
      ->delimiter(',')
      ->capture_default_str();
  ablate->add_flag("--no-variants", [&](std::int64_t) { aopt.variants.clear(); }, "Only the evaluation-time arms");
  ablate->add_option("--locations", aopt.alt_locations, "Prune locations of the 'locations' variant")
      ->delimiter(',')
      ->capture_default_str();
  ablate->add_option("--batch-size", aopt.eval_batch, "Evaluation batch size")->capture_default_str();
  ablate->add_option("--out-dir", ablate_out, "Defaults to the config's out_dir");
  ablate->callback([&] { action = [&] { return cmd_ablate(run, config, overrides, aopt, ablate_out); }; });

  CLI11_PARSE(app, argc, argv);
  try {
    return action();
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
