// Command-line front end: generate synthetic clip datasets, train the
// tracker, score checkpoints, spot-check gradients, and dump intermediates
// for eyeballing. Every subcommand exits 0 on success and nonzero with a
// one-line diagnostic on failure. Directory outputs are built in a temporary
// sibling and renamed into place, and single files go through the same
// write-to-temp path, so a failed run leaves nothing half-written.

#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "kinepose/config.hpp"
#include "kinepose/evaluation.hpp"
#include "kinepose/grad_suite.hpp"
#include "kinepose/io.hpp"
#include "kinepose/network.hpp"
#include "kinepose/rng.hpp"
#include "kinepose/synthdata.hpp"
#include "kinepose/training.hpp"

namespace fs = std::filesystem;
using namespace kinepose;

namespace {

// ---- output staging ----

// A directory output under construction: filled at `tmp`, moved to `target`
// by commit(). Failures before commit leave the target untouched.
struct StagedDir {
  fs::path target;
  fs::path tmp;
  void commit() {
    fs::remove_all(target);
    fs::rename(tmp, target);
  }
};

StagedDir stage_dir(const fs::path& raw, bool force) {
  fs::path target = raw.lexically_normal();
  if (target.filename().empty()) target = target.parent_path();  // drop trailing slash
  const std::string leaf = target.filename().string();
  if (leaf.empty() || leaf == "." || leaf == "..") {
    throw std::runtime_error(raw.string() + ": not a usable output directory");
  }
  if (fs::exists(target) && !fs::is_directory(target)) {
    throw std::runtime_error(target.string() + ": exists and is not a directory");
  }
  if (fs::is_directory(target) && !fs::is_empty(target) && !force) {
    throw std::runtime_error(target.string() +
                             ": already exists and is not empty (pass --force to replace)");
  }
  StagedDir staged;
  staged.target = target;
  staged.tmp = target;
  staged.tmp += ".tmp";
  fs::remove_all(staged.tmp);
  fs::create_directories(staged.tmp);
  return staged;
}

// ---- gen ----

struct GenArgs {
  std::string out;
  std::size_t num = 10;
  std::size_t k = 5;
  std::size_t frames = 5;
  std::size_t size = 64;
  std::string occlusion = "none";
  std::size_t mask_size = 12;
  std::size_t occluded = 2;
  std::uint64_t seed = 1;
  bool force = false;
};

int cmd_gen(const GenArgs& a) {
  if (a.num < 1) throw std::runtime_error("gen: --num must be >= 1");
  const OcclusionMode mode = occlusion_mode_from_name(a.occlusion);

  GenConfig cfg;
  cfg.joints = a.k;
  cfg.frames = a.frames;
  cfg.height = a.size;
  cfg.width = a.size;
  cfg.seed = a.seed;
  std::vector<PoseSequence> seqs = generate_dataset(cfg, a.num);
  if (mode != OcclusionMode::none) {
    for (std::size_t n = 0; n < seqs.size(); ++n) {
      OcclusionSpec spec;
      spec.mode = mode;
      spec.mask_size = a.mask_size;
      spec.count = a.occluded;
      spec.seed = Rng::stream(a.seed, "occ/seq/" + std::to_string(n)).next_u64();
      seqs[n] = apply_occlusion(seqs[n], spec);
    }
  }

  StagedDir staged = stage_dir(a.out, a.force);
  write_dataset(staged.tmp, seqs);
  staged.commit();
  std::printf("wrote %zu sequences (K=%zu, T=%zu, %zux%zu, occlusion=%s) to %s\n", seqs.size(),
              a.k, a.frames, a.size, a.size, a.occlusion.c_str(),
              staged.target.string().c_str());
  return 0;
}

// ---- train ----

struct TrainArgs {
  std::string data;
  std::string holdout;
  std::string config;
  std::string out;
  double lr = 0.005;
  std::size_t epochs = 30;
  std::size_t batch = 5;
  std::size_t frames = 5;
  std::uint64_t seed = 1;
  bool flip = false;
  std::size_t interval = 10;
  double sigma = 2.0;
  std::size_t channels = 32;
  std::string variant = "full";
};

int cmd_train(const CLI::App* sub, const TrainArgs& a) {
  // Precedence: built-in defaults, then the config file, then flags.
  TrainConfig cfg;
  std::size_t channels = 32;
  Variant variant = Variant::full;
  if (!a.config.empty()) {
    const ConfigValues file = load_config_file(a.config);
    reject_unknown_keys(file,
                        {"lr", "epochs", "batch_size", "frames", "seed", "flip",
                         "checkpoint_interval", "heatmap_sigma", "channels", "variant"},
                        a.config);
    cfg.lr = config_double(file, "lr", cfg.lr);
    cfg.epochs = config_size(file, "epochs", cfg.epochs);
    cfg.batch_size = config_size(file, "batch_size", cfg.batch_size);
    cfg.frames = config_size(file, "frames", cfg.frames);
    cfg.seed = config_u64(file, "seed", cfg.seed);
    cfg.flip = config_bool(file, "flip", cfg.flip);
    cfg.checkpoint_interval = config_size(file, "checkpoint_interval", cfg.checkpoint_interval);
    cfg.heatmap_sigma = config_double(file, "heatmap_sigma", cfg.heatmap_sigma);
    channels = config_size(file, "channels", channels);
    variant = variant_from_name(config_string(file, "variant", variant_name(variant)));
  }
  if (sub->count("--lr")) cfg.lr = a.lr;
  if (sub->count("--epochs")) cfg.epochs = a.epochs;
  if (sub->count("--batch")) cfg.batch_size = a.batch;
  if (sub->count("--frames")) cfg.frames = a.frames;
  if (sub->count("--seed")) cfg.seed = a.seed;
  if (sub->count("--flip")) cfg.flip = a.flip;
  if (sub->count("--ckpt-interval")) cfg.checkpoint_interval = a.interval;
  if (sub->count("--sigma")) cfg.heatmap_sigma = a.sigma;
  if (sub->count("--channels")) channels = a.channels;
  if (sub->count("--variant")) variant = variant_from_name(a.variant);

  const std::vector<PoseSequence> trainset = load_dataset(a.data);
  std::vector<PoseSequence> holdout;
  if (!a.holdout.empty()) holdout = load_dataset(a.holdout);

  // --out names the final checkpoint; snapshots and the metrics CSV land
  // beside it.
  const fs::path out(a.out);
  const std::string name =
      out.extension() == ".kim" ? out.stem().string() : out.filename().string();
  if (name.empty()) throw std::runtime_error("train: --out must name a checkpoint file");
  const fs::path out_dir = out.parent_path().empty() ? fs::path(".") : out.parent_path();
  fs::create_directories(out_dir);

  const ModelParams init =
      init_params(trainset[0].joint_count(), channels, variant, cfg.seed);
  const TrainResult result = train(init, trainset, holdout, cfg, out_dir, name);

  char tail[128];
  if (result.epoch_losses.empty()) {
    std::snprintf(tail, sizeof tail, "initial weights only");
  } else {
    std::snprintf(tail, sizeof tail, "final loss %.6g", result.epoch_losses.back());
  }
  std::printf("trained %s model (K=%zu, channels=%zu) for %zu epochs, %zu steps: %s; wrote %s\n",
              variant_name(variant), trainset[0].joint_count(), channels, cfg.epochs,
              result.step_losses.size(), tail,
              (out_dir / (name + ".kim")).string().c_str());
  return 0;
}

// ---- eval ----

struct EvalArgs {
  std::string data;
  std::string ckpt;
  std::string norm = "person";
  double alpha = 0.2;
  std::string out;
  std::size_t sweep = 0;
  std::string sweep_out = "sweep.csv";
  std::uint64_t occ_seed = 7;
  std::size_t mask_size = 12;
};

int cmd_eval(const EvalArgs& a) {
  PckConfig cfg;
  cfg.alpha = a.alpha;
  cfg.norm_mode = norm_mode_from_name(a.norm);
  const std::vector<PoseSequence> data = load_dataset(a.data);
  const std::size_t joints = data[0].joint_count();

  const bool oracle = a.ckpt == "oracle:gt";
  if (a.sweep > 0 && oracle) {
    throw std::runtime_error("eval: --sweep needs a real checkpoint, not oracle:gt");
  }
  if (a.sweep > joints) {
    throw std::runtime_error("eval: --sweep " + std::to_string(a.sweep) + " exceeds the " +
                             std::to_string(joints) + " joints in the data");
  }

  ModelParams params;
  MetricsReport report;
  if (oracle) {
    // Test hook: score the ground truth against itself (sanity ceiling).
    PckTally sum;
    for (const PoseSequence& seq : data) sum.add(pck_tally(seq.joints, seq, cfg));
    report = sum.report();
  } else {
    params = load_checkpoint(a.ckpt);
    report = evaluate_model(params, data, cfg);
  }

  const std::string csv = metrics_csv(report);
  if (a.out.empty()) {
    std::fputs(csv.c_str(), stdout);
  } else {
    kinepose::detail::write_file_atomic(a.out, csv);
  }
  std::printf("mpck %.6g (%s-normalized, alpha %.6g, %zu sequences, %zu skipped frames)\n",
              report.mpck, a.norm.c_str(), a.alpha, data.size(), report.skipped_frames);

  if (a.sweep > 0) {
    std::vector<std::size_t> counts;
    for (std::size_t c = 0; c <= a.sweep; ++c) counts.push_back(c);
    const std::vector<SweepRow> rows =
        occlusion_sweep(params, data, counts, cfg, a.occ_seed, a.mask_size);
    kinepose::detail::write_file_atomic(a.sweep_out, sweep_csv(rows));
    std::printf("occlusion sweep 0..%zu written to %s\n", a.sweep, a.sweep_out.c_str());
  }
  return 0;
}

// ---- gradcheck ----

struct GradArgs {
  std::string scope = "op";
  std::uint64_t seed = 1;
  std::size_t seeds = 1;
  double max_error = 0.0;
};

int cmd_gradcheck(const GradArgs& a) {
  const GradScope scope = grad_scope_from_name(a.scope);
  const GradSuiteReport report = run_grad_suite(scope, a.seed, a.seeds);
  const double threshold = a.max_error > 0.0 ? a.max_error : report.threshold;
  const bool pass = report.max_error < threshold;
  std::printf("gradcheck scope=%s seeds=%llu..%llu max_error=%.3g threshold=%.3g %s\n",
              grad_scope_name(scope), static_cast<unsigned long long>(a.seed),
              static_cast<unsigned long long>(a.seed + a.seeds - 1), report.max_error, threshold,
              pass ? "PASS" : "FAIL");
  return pass ? 0 : 1;
}

// ---- dump ----

struct DumpArgs {
  std::string ckpt;
  std::string data;
  std::size_t seq = 0;
  std::string what = "attention";
  std::string out = "dump";
  bool force = false;
};

int cmd_dump(const DumpArgs& a) {
  if (a.what != "attention" && a.what != "heatmaps" && a.what != "initial") {
    throw std::runtime_error("dump: --what must be attention, heatmaps, or initial");
  }
  const ModelParams params = load_checkpoint(a.ckpt);
  const fs::path seq_dir = fs::path(a.data) / ("seq_" + std::to_string(a.seq));
  if (!fs::exists(seq_dir / "meta.txt")) {
    throw std::runtime_error(a.data + ": no sequence seq_" + std::to_string(a.seq));
  }
  const PoseSequence seq = load_sequence_dir(seq_dir);

  Tape tape;
  ModelVars vars = register_params(tape, params);
  const SequenceOutput out = forward_sequence(tape, params, vars, seq.frames);

  StagedDir staged = stage_dir(a.out, a.force);
  std::size_t files = 0;
  if (a.what == "attention") {
    for (std::size_t i = 0; i < out.attentions.size(); ++i) {
      kinepose::detail::write_file_atomic(
          staged.tmp / ("attention_step" + std::to_string(i) + ".csv"),
          attention_to_csv(tape.value(out.attentions[i])));
      ++files;
    }
  } else if (a.what == "heatmaps") {
    for (std::size_t t = 0; t < out.heatmaps.size(); ++t) {
      const Tensor& maps = tape.value(out.heatmaps[t]);
      const std::size_t plane = maps.dim(1) * maps.dim(2);
      for (std::size_t k = 0; k < maps.dim(0); ++k) {
        Tensor channel({maps.dim(1), maps.dim(2)});
        for (std::size_t i = 0; i < plane; ++i) channel[i] = maps[k * plane + i];
        write_pgm(staged.tmp /
                      ("heatmap_t" + std::to_string(t) + "_j" + std::to_string(k) + ".pgm"),
                  channel);
        ++files;
      }
    }
  } else {
    for (std::size_t i = 0; i < out.initial_heatmaps.size(); ++i) {
      save_tensor(tape.value(out.initial_heatmaps[i]),
                  staged.tmp / ("initial_step" + std::to_string(i) + ".ten"));
      ++files;
    }
  }
  staged.commit();
  std::printf("wrote %zu %s file(s) for seq_%zu to %s\n", files, a.what.c_str(), a.seq,
              staged.target.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic video keypoint tracker: dataset generation, training, evaluation,\n"
               "gradient checking, and intermediate dumps"};
  app.require_subcommand(1);
  app.footer("Set KINEPOSE_THREADS to cap worker threads (default 1, fully deterministic).");

  int rc = 0;

  GenArgs g;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic clip dataset");
  gen->add_option("--out", g.out, "output dataset directory")->required();
  gen->add_option("--num", g.num, "number of sequences")->capture_default_str();
  gen->add_option("--k", g.k, "joints per skeleton")->capture_default_str();
  gen->add_option("--frames", g.frames, "frames per sequence")->capture_default_str();
  gen->add_option("--size", g.size, "frame height and width (>= 8, multiple of 4)")
      ->capture_default_str();
  gen->add_option("--occlusion", g.occlusion,
                  "occlusion mode: none, temporal, spatial, count_sweep")
      ->capture_default_str();
  gen->add_option("--mask-size", g.mask_size, "occluding square side, pixels")
      ->capture_default_str();
  gen->add_option("--occluded", g.occluded,
                  "masks per frame (temporal/spatial) or joints hidden (count_sweep)")
      ->capture_default_str();
  gen->add_option("--seed", g.seed, "master random seed")->capture_default_str();
  gen->add_flag("--force", g.force, "replace an existing non-empty output directory");
  gen->callback([&] { rc = cmd_gen(g); });

  TrainArgs t;
  CLI::App* train = app.add_subcommand("train", "train a tracker on a generated dataset");
  train->add_option("--data", t.data, "training dataset directory")->required();
  train->add_option("--holdout", t.holdout, "holdout dataset directory for per-epoch scoring");
  train->add_option("--config", t.config, "key = value config file (flags override it)");
  train->add_option("--out", t.out, "final checkpoint path, e.g. runs/model.kim")->required();
  train->add_option("--lr", t.lr, "Adam learning rate")->capture_default_str();
  train->add_option("--epochs", t.epochs, "training epochs")->capture_default_str();
  train->add_option("--batch", t.batch, "clips per optimizer step")->capture_default_str();
  train->add_option("--frames", t.frames, "frames per training window")->capture_default_str();
  train->add_option("--seed", t.seed, "master random seed")->capture_default_str();
  train->add_flag("--flip", t.flip, "mirror augmentation with left/right channel swap");
  train->add_option("--ckpt-interval", t.interval, "epochs between snapshots (0 = final only)")
      ->capture_default_str();
  train->add_option("--sigma", t.sigma, "target heatmap blob width, pixels")
      ->capture_default_str();
  train->add_option("--channels", t.channels, "encoder feature channels")->capture_default_str();
  train->add_option("--variant", t.variant,
                    "full, share_qk, no_sqrt_d, identity_attention, heatmap_qk, residual")
      ->capture_default_str();
  train->callback([&] { rc = cmd_train(train, t); });

  EvalArgs e;
  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
  eval->add_option("--data", e.data, "evaluation dataset directory")->required();
  eval->add_option("--ckpt", e.ckpt, "checkpoint path, or oracle:gt for the ground-truth hook")
      ->required();
  eval->add_option("--norm", e.norm, "distance normalizer: person or torso")
      ->capture_default_str();
  eval->add_option("--alpha", e.alpha, "correctness threshold as a fraction of the normalizer")
      ->capture_default_str();
  eval->add_option("--out", e.out, "per-joint report CSV path (default: print to stdout)");
  eval->add_option("--sweep", e.sweep,
                   "also sweep occlusion counts 0..N against the identity-attention ablation");
  eval->add_option("--sweep-out", e.sweep_out, "sweep CSV path")->capture_default_str();
  eval->add_option("--occ-seed", e.occ_seed, "mask placement seed for the sweep")
      ->capture_default_str();
  eval->add_option("--mask-size", e.mask_size, "occluding square side for the sweep, pixels")
      ->capture_default_str();
  eval->callback([&] { rc = cmd_eval(e); });

  GradArgs gc;
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference check of analytic gradients");
  gradcheck->add_option("--scope", gc.scope, "op, kmm, or pipeline")->capture_default_str();
  gradcheck->add_option("--seed", gc.seed, "first seed")->capture_default_str();
  gradcheck->add_option("--seeds", gc.seeds, "number of consecutive seeds")
      ->capture_default_str();
  gradcheck->add_option("--max-error", gc.max_error,
                        "override the pass threshold (0 = scope default)")
      ->capture_default_str();
  gradcheck->callback([&] { rc = cmd_gradcheck(gc); });

  DumpArgs d;
  CLI::App* dump = app.add_subcommand("dump", "dump per-step intermediates for one sequence");
  dump->add_option("--ckpt", d.ckpt, "checkpoint path")->required();
  dump->add_option("--data", d.data, "dataset directory")->required();
  dump->add_option("--seq", d.seq, "sequence index")->capture_default_str();
  dump->add_option("--what", d.what,
                   "attention (CSV), heatmaps (PGM per joint), or initial (.ten per step)")
      ->capture_default_str();
  dump->add_option("--out", d.out, "output directory")->capture_default_str();
  dump->add_flag("--force", d.force, "replace an existing non-empty output directory");
  dump->callback([&] { rc = cmd_dump(d); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  } catch (const std::exception& err) {
    std::fprintf(stderr, "kinepose: %s\n", err.what());
    return 1;
  }
  return rc;
}
