#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "kinepose/evaluation.hpp"
#include "kinepose/network.hpp"
#include "kinepose/synthdata.hpp"
#include "kinepose/tensor.hpp"

namespace fs = std::filesystem;

using kinepose::ModelParams;
using kinepose::ModelVars;
using kinepose::PoseSequence;
using kinepose::SequenceOutput;
using kinepose::Tape;
using kinepose::Tensor;

namespace {

struct CliRun {
  int rc = -1;
  std::string out;  // stdout and stderr interleaved
};

// Drive the installed binary exactly as a user would, via the shell.
CliRun run_cli(const std::string& args) {
  const std::string cmd = std::string(KINEPOSE_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CliRun r;
  char buf[512];
  while (std::fgets(buf, sizeof buf, pipe) != nullptr) r.out += buf;
  const int status = pclose(pipe);
  REQUIRE(WIFEXITED(status));
  r.rc = WEXITSTATUS(status);
  return r;
}

fs::path fresh_dir(const std::string& leaf) {
  auto dir = fs::temp_directory_path() / leaf;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    out.push_back(text.substr(pos, eol - pos));
    pos = eol + 1;
  }
  return out;
}

// Every regular file under root, keyed by its path relative to root.
std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    out[entry.path().lexically_relative(root).string()] =
        kinepose::detail::read_file_bytes(entry.path());
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  kinepose::detail::write_file_atomic(path, text);
}

}  // namespace

TEST_CASE("help lists every subcommand and flag defaults", "[cli]") {
  CliRun top = run_cli("--help");
  REQUIRE(top.rc == 0);
  for (const char* sub : {"gen", "train", "eval", "gradcheck", "dump"}) {
    REQUIRE(top.out.find(sub) != std::string::npos);
  }
  REQUIRE(top.out.find("KINEPOSE_THREADS") != std::string::npos);

  CliRun gen = run_cli("gen --help");
  REQUIRE(gen.rc == 0);
  for (const char* flag : {"--out", "--num", "--k", "--frames", "--size", "--occlusion",
                           "--seed", "--force"}) {
    REQUIRE(gen.out.find(flag) != std::string::npos);
  }

  CliRun train = run_cli("train --help");
  REQUIRE(train.rc == 0);
  for (const char* flag : {"--data", "--holdout", "--config", "--out", "--lr", "--epochs",
                           "--batch", "--frames", "--seed", "--flip", "--ckpt-interval",
                           "--sigma", "--channels", "--variant"}) {
    REQUIRE(train.out.find(flag) != std::string::npos);
  }
  REQUIRE(train.out.find("0.005") != std::string::npos);  // lr default is visible

  CliRun eval = run_cli("eval --help");
  REQUIRE(eval.rc == 0);
  for (const char* flag : {"--data", "--ckpt", "--norm", "--alpha", "--sweep"}) {
    REQUIRE(eval.out.find(flag) != std::string::npos);
  }
  REQUIRE(eval.out.find("person") != std::string::npos);
  REQUIRE(eval.out.find("0.2") != std::string::npos);

  REQUIRE(run_cli("gradcheck --help").rc == 0);
  REQUIRE(run_cli("dump --help").rc == 0);
}

TEST_CASE("gen writes the documented dataset layout", "[cli]") {
  const fs::path root = fresh_dir("kinepose_cli_gen");
  const fs::path ds = root / "ds";
  CliRun r = run_cli("gen --out " + q(ds) + " --num 2 --k 3 --frames 3 --size 16 --seed 4");
  REQUIRE(r.rc == 0);
  REQUIRE(r.out.find("wrote 2 sequences") != std::string::npos);

  for (std::size_t n = 0; n < 2; ++n) {
    const fs::path seq = ds / ("seq_" + std::to_string(n));
    REQUIRE(fs::exists(seq / "meta.txt"));
    REQUIRE(fs::exists(seq / "gt.csv"));
    for (std::size_t t = 0; t < 3; ++t) {
      REQUIRE(fs::exists(seq / ("frame_" + std::to_string(t) + ".ppm")));
    }
  }
  REQUIRE_FALSE(fs::exists(ds / "seq_2"));
  REQUIRE_FALSE(fs::exists(root / "ds.tmp"));  // staging directory cleaned up

  const auto seqs = kinepose::load_dataset(ds);
  REQUIRE(seqs.size() == 2);
  REQUIRE(seqs[0].joint_count() == 3);
  REQUIRE(seqs[0].frame_count() == 3);
  REQUIRE(seqs[0].height() == 16);
  REQUIRE(seqs[0].width() == 16);
}

TEST_CASE("gen handles a minimal one-frame dataset", "[cli]") {
  const fs::path ds = fresh_dir("kinepose_cli_gen_min") / "ds";
  REQUIRE(run_cli("gen --out " + q(ds) + " --num 1 --k 2 --frames 1 --size 8").rc == 0);
  const auto seqs = kinepose::load_dataset(ds);
  REQUIRE(seqs.size() == 1);
  REQUIRE(seqs[0].frame_count() == 1);
}

TEST_CASE("gen is reproducible for a fixed seed", "[cli]") {
  const fs::path root = fresh_dir("kinepose_cli_gen_repro");
  const std::string flags = " --num 2 --k 3 --frames 2 --size 16";
  REQUIRE(run_cli("gen --out " + q(root / "a") + flags + " --seed 11").rc == 0);
  REQUIRE(run_cli("gen --out " + q(root / "b") + flags + " --seed 11").rc == 0);
  REQUIRE(run_cli("gen --out " + q(root / "c") + flags + " --seed 12").rc == 0);

  const auto a = tree_bytes(root / "a"), b = tree_bytes(root / "b"), c = tree_bytes(root / "c");
  REQUIRE(a.size() == 2 * (2 + 2));  // per sequence: 2 frames + gt.csv + meta.txt
  REQUIRE(a == b);
  REQUIRE(a != c);
}

TEST_CASE("gen refuses a non-empty output directory unless forced", "[cli]") {
  const fs::path ds = fresh_dir("kinepose_cli_gen_force");
  write_text(ds / "stale.txt", "old contents\n");

  CliRun refused = run_cli("gen --out " + q(ds) + " --num 1 --k 2 --frames 2 --size 8");
  REQUIRE(refused.rc != 0);
  REQUIRE(refused.out.find("--force") != std::string::npos);
  REQUIRE(fs::exists(ds / "stale.txt"));  // nothing was touched

  REQUIRE(run_cli("gen --out " + q(ds) + " --num 1 --k 2 --frames 2 --size 8 --force").rc == 0);
  REQUIRE_FALSE(fs::exists(ds / "stale.txt"));
  REQUIRE(fs::exists(ds / "seq_0" / "meta.txt"));
}

TEST_CASE("gen applies the requested occlusion mode", "[cli]") {
  const fs::path ds = fresh_dir("kinepose_cli_gen_occ") / "ds";
  REQUIRE(run_cli("gen --out " + q(ds) +
                  " --num 2 --k 4 --frames 4 --size 16 --occlusion count_sweep --occluded 2")
              .rc == 0);
  const auto seqs = kinepose::load_dataset(ds);
  std::size_t hidden = 0, hidden_first = 0;
  for (const auto& seq : seqs) {
    for (std::size_t t = 0; t < seq.frame_count(); ++t) {
      for (std::size_t k = 0; k < seq.joint_count(); ++k) {
        if (!seq.visible[t][k]) ++(t == 0 ? hidden_first : hidden);
      }
    }
  }
  // Two picked joints per sequence stay covered in frames 1..3; bystanders
  // wandering under a mask may push the count higher. Frame 0 is never masked.
  REQUIRE(hidden >= 2 * 3 * 2);
  REQUIRE(hidden <= 2 * 3 * 4);
  REQUIRE(hidden_first == 0);

  CliRun bad = run_cli("gen --out " + q(ds) + " --force --num 1 --occlusion sideways");
  REQUIRE(bad.rc != 0);
  REQUIRE(bad.out.find("sideways") != std::string::npos);
}

TEST_CASE("train rejects config files with unknown or malformed keys", "[cli]") {
  const fs::path root = fresh_dir("kinepose_cli_badcfg");
  const fs::path ds = root / "ds";
  REQUIRE(run_cli("gen --out " + q(ds) + " --num 1 --k 2 --frames 2 --size 8").rc == 0);

  write_text(root / "typo.cfg", "epochs = 1\nlearning_rate = 0.1\n");
  CliRun typo = run_cli("train --data " + q(ds) + " --config " + q(root / "typo.cfg") +
                        " --out " + q(root / "m.kim"));
  REQUIRE(typo.rc != 0);
  REQUIRE(typo.out.find("learning_rate") != std::string::npos);
  REQUIRE_FALSE(fs::exists(root / "m.kim"));  // failed run leaves no outputs

  write_text(root / "noeq.cfg", "epochs 1\n");
  REQUIRE(run_cli("train --data " + q(ds) + " --config " + q(root / "noeq.cfg") + " --out " +
                  q(root / "m.kim"))
              .rc != 0);

  write_text(root / "dup.cfg", "epochs = 1\nepochs = 2\n");
  CliRun dup = run_cli("train --data " + q(ds) + " --config " + q(root / "dup.cfg") + " --out " +
                       q(root / "m.kim"));
  REQUIRE(dup.rc != 0);
  REQUIRE(dup.out.find("duplicate") != std::string::npos);
}

TEST_CASE("flags override the config file which overrides defaults", "[cli]") {
  const fs::path root = fresh_dir("kinepose_cli_precedence");
  const fs::path ds = root / "ds";
  REQUIRE(run_cli("gen --out " + q(ds) + " --num 2 --k 2 --frames 3 --size 16 --seed 2").rc == 0);
  write_text(root / "run.cfg", "epochs = 0\nchannels = 6\nframes = 2\nbatch_size = 2\n");
  const std::string base = "train --data " + q(ds) + " --config " + q(root / "run.cfg");

  // Config file wins over the built-in 30-epoch default: zero epochs trains
  // nothing but still writes the initial checkpoint and a header-only CSV.
  REQUIRE(run_cli(base + " --out " + q(root / "zero.kim")).rc == 0);
  const std::string zero_csv =
      kinepose::detail::read_file_bytes(root / "zero.metrics.csv");
  REQUIRE(zero_csv == "step,epoch,loss,holdout_mpck\n");

  // The checkpoint holds the untouched seeded initialization: the whole CLI
  // path reproduces a library-side init bit for bit.
  const ModelParams loaded = kinepose::load_checkpoint(root / "zero.kim");
  const ModelParams expect = kinepose::init_params(2, 6, kinepose::Variant::full, 1);
  const auto got = kinepose::named_tensors(loaded), want = kinepose::named_tensors(expect);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(*got[i].second == *want[i].second);

  // A flag outranks the same setting in the file.
  REQUIRE(run_cli(base + " --epochs 1 --out " + q(root / "one.kim")).rc == 0);
  const auto lines = split_lines(kinepose::detail::read_file_bytes(root / "one.metrics.csv"));
  REQUIRE(lines.size() == 2);
  REQUIRE(lines[0] == "step,epoch,loss,holdout_mpck");
  REQUIRE(lines[1].rfind("1,1,", 0) == 0);  // one batch of two clips -> one step
}

TEST_CASE("training runs are bitwise reproducible end to end", "[cli]") {
  const fs::path root = fresh_dir("kinepose_cli_repro");
  const fs::path ds = root / "ds";
  REQUIRE(run_cli("gen --out " + q(ds) + " --num 3 --k 2 --frames 3 --size 16 --seed 8").rc == 0);
  const std::string flags = " --epochs 2 --batch 2 --frames 2 --channels 6 --seed 5 --holdout " +
                            q(ds) + " --data " + q(ds);
  REQUIRE(run_cli("train" + flags + " --out " + q(root / "a" / "m.kim")).rc == 0);
  REQUIRE(run_cli("train" + flags + " --out " + q(root / "b" / "m.kim")).rc == 0);

  REQUIRE(kinepose::detail::read_file_bytes(root / "a" / "m.kim") ==
          kinepose::detail::read_file_bytes(root / "b" / "m.kim"));
  REQUIRE(kinepose::detail::read_file_bytes(root / "a" / "m.metrics.csv") ==
          kinepose::detail::read_file_bytes(root / "b" / "m.metrics.csv"));
}

TEST_CASE("eval scores the ground-truth oracle perfectly", "[cli]") {
  const fs::path root = fresh_dir("kinepose_cli_oracle");
  const fs::path ds = root / "ds";
  REQUIRE(run_cli("gen --out " + q(ds) + " --num 2 --k 3 --frames 3 --size 16 --seed 6").rc == 0);

  CliRun r = run_cli("eval --data " + q(ds) + " --ckpt oracle:gt --out " + q(root / "rep.csv"));
  REQUIRE(r.rc == 0);
  REQUIRE(r.out.find("mpck 1 ") != std::string::npos);
  const auto lines = split_lines(kinepose::detail::read_file_bytes(root / "rep.csv"));
  REQUIRE(lines.size() == 5);  // header + 3 joints + mpck
  REQUIRE(lines[0] == "joint,pck");
  REQUIRE(lines[4] == "mpck,1");
}

TEST_CASE("eval reports per-joint rows for any checkpoint and norm mode", "[cli]") {
  const fs::path root = fresh_dir("kinepose_cli_eval");
  const fs::path ds = root / "ds";
  REQUIRE(run_cli("gen --out " + q(ds) + " --num 2 --k 3 --frames 3 --size 16 --seed 7").rc == 0);
  REQUIRE(run_cli("train --data " + q(ds) + " --epochs 0 --frames 3 --channels 6 --out " +
                  q(root / "m.kim"))
              .rc == 0);

  // The widest-open threshold keeps the score a valid fraction even for
  // untrained weights; both normalizers must accept it.
  for (const std::string norm : {"person", "torso"}) {
    CliRun r = run_cli("eval --data " + q(ds) + " --ckpt " + q(root / "m.kim") +
                       " --alpha 1.0 --norm " + norm + " --out " + q(root / "rep.csv"));
    REQUIRE(r.rc == 0);
    const auto lines = split_lines(kinepose::detail::read_file_bytes(root / "rep.csv"));
    REQUIRE(lines.size() == 5);
    for (std::size_t k = 0; k < 3; ++k) {
      double v = -1.0;
      REQUIRE(std::sscanf(lines[1 + k].c_str(), "%*u,%lf", &v) == 1);
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
  }

  REQUIRE(run_cli("eval --data " + q(ds) + " --ckpt " + q(root / "m.kim") + " --alpha 0").rc !=
          0);
  REQUIRE(run_cli("eval --data " + q(ds) + " --ckpt " + q(root / "m.kim") + " --norm diagonal")
              .rc != 0);
  REQUIRE(run_cli("eval --data " + q(ds) + " --ckpt oracle:gt --sweep 1").rc != 0);
}

TEST_CASE("eval sweep emits one row per occlusion count", "[cli]") {
  const fs::path root = fresh_dir("kinepose_cli_sweep");
  const fs::path ds = root / "ds";
  REQUIRE(run_cli("gen --out " + q(ds) + " --num 2 --k 3 --frames 3 --size 16 --seed 9").rc == 0);
  REQUIRE(run_cli("train --data " + q(ds) + " --epochs 0 --frames 3 --channels 6 --out " +
                  q(root / "m.kim"))
              .rc == 0);

  CliRun r = run_cli("eval --data " + q(ds) + " --ckpt " + q(root / "m.kim") +
                     " --alpha 1.0 --out " + q(root / "rep.csv") + " --sweep 2 --sweep-out " +
                     q(root / "sw.csv"));
  REQUIRE(r.rc == 0);
  const auto lines = split_lines(kinepose::detail::read_file_bytes(root / "sw.csv"));
  REQUIRE(lines.size() == 4);  // header + counts 0,1,2
  REQUIRE(lines[0] == "occluded_count,mpck_full,mpck_identity");

  // The zero-count row is the plain evaluation of the same checkpoint.
  double plain = -1.0;
  const auto rep = split_lines(kinepose::detail::read_file_bytes(root / "rep.csv"));
  REQUIRE(std::sscanf(rep.back().c_str(), "mpck,%lf", &plain) == 1);
  double count0 = 0.0, full0 = -1.0, ident0 = -1.0;
  REQUIRE(std::sscanf(lines[1].c_str(), "%lf,%lf,%lf", &count0, &full0, &ident0) == 3);
  REQUIRE(count0 == 0.0);
  REQUIRE(full0 == plain);

  // More joints than the skeleton has is an error, not a truncated sweep.
  REQUIRE(run_cli("eval --data " + q(ds) + " --ckpt " + q(root / "m.kim") + " --sweep 9").rc !=
          0);
}

TEST_CASE("dump round-trips attention, heatmaps, and initial estimates", "[cli]") {
  const fs::path root = fresh_dir("kinepose_cli_dump");
  const fs::path ds = root / "ds";
  REQUIRE(run_cli("gen --out " + q(ds) + " --num 2 --k 3 --frames 3 --size 16 --seed 3").rc == 0);
  REQUIRE(run_cli("train --data " + q(ds) + " --epochs 0 --frames 3 --channels 6 --out " +
                  q(root / "m.kim"))
              .rc == 0);
  const std::string base =
      "dump --ckpt " + q(root / "m.kim") + " --data " + q(ds) + " --seq 1 ";

  // Reference forward pass through the library for the same clip.
  const ModelParams params = kinepose::load_checkpoint(root / "m.kim");
  const PoseSequence seq = kinepose::load_sequence_dir(ds / "seq_1");
  Tape tape;
  ModelVars vars = kinepose::register_params(tape, params);
  const SequenceOutput fwd = kinepose::forward_sequence(tape, params, vars, seq.frames);

  // Attention: one CSV per step, each row a distribution within 1e-9 after
  // the decimal round-trip.
  REQUIRE(run_cli(base + "--what attention --out " + q(root / "att")).rc == 0);
  for (std::size_t i = 0; i < 2; ++i) {
    const fs::path file = root / "att" / ("attention_step" + std::to_string(i) + ".csv");
    const auto rows = split_lines(kinepose::detail::read_file_bytes(file));
    REQUIRE(rows.size() == 3);
    for (const std::string& row : rows) {
      double sum = 0.0;
      const char* s = row.c_str();
      char* end = nullptr;
      for (std::size_t k = 0; k < 3; ++k) {
        sum += std::strtod(s, &end);
        REQUIRE(end != s);
        s = *end == ',' ? end + 1 : end;
      }
      REQUIRE(std::abs(sum - 1.0) < 1e-9);
    }
  }
  REQUIRE_FALSE(fs::exists(root / "att" / "attention_step2.csv"));

  // Heatmaps: one min-max normalized PGM per frame and joint, 4x4 at stride 4.
  REQUIRE(run_cli(base + "--what heatmaps --out " + q(root / "hm")).rc == 0);
  std::size_t pgms = 0;
  for (const auto& entry : fs::directory_iterator(root / "hm")) ++pgms;
  REQUIRE(pgms == 3 * 3);
  const std::string pgm =
      kinepose::detail::read_file_bytes(root / "hm" / "heatmap_t2_j1.pgm");
  const std::string header = "P5\n4 4\n255\n";
  REQUIRE(pgm.rfind(header, 0) == 0);
  REQUIRE(pgm.size() == header.size() + 16);

  // Initial estimates: bitwise round-trip against the in-memory tensors.
  REQUIRE(run_cli(base + "--what initial --out " + q(root / "ini")).rc == 0);
  for (std::size_t i = 0; i < 2; ++i) {
    const Tensor dumped =
        kinepose::load_tensor(root / "ini" / ("initial_step" + std::to_string(i) + ".ten"));
    REQUIRE(dumped == tape.value(fwd.initial_heatmaps[i]));
  }

  CliRun refused = run_cli(base + "--what initial --out " + q(root / "ini"));
  REQUIRE(refused.rc != 0);
  REQUIRE(refused.out.find("--force") != std::string::npos);
  REQUIRE(run_cli(base + "--what initial --out " + q(root / "ini") + " --force").rc == 0);
  REQUIRE(run_cli(base + "--what everything --out " + q(root / "x")).rc != 0);
  REQUIRE(run_cli("dump --ckpt " + q(root / "m.kim") + " --data " + q(ds) +
                  " --seq 7 --what attention --out " + q(root / "y"))
              .rc != 0);
}

TEST_CASE("gradcheck passes per scope and honors a custom bar", "[cli]") {
  CliRun op = run_cli("gradcheck --scope op --seed 41");
  REQUIRE(op.rc == 0);
  REQUIRE(op.out.find("PASS") != std::string::npos);
  REQUIRE(run_cli("gradcheck --scope kmm --seed 42 --seeds 2").rc == 0);
  REQUIRE(run_cli("gradcheck --scope pipeline --seed 43").rc == 0);

  CliRun fail = run_cli("gradcheck --scope op --seed 41 --max-error 1e-18");
  REQUIRE(fail.rc != 0);
  REQUIRE(fail.out.find("FAIL") != std::string::npos);

  REQUIRE(run_cli("gradcheck --scope everything").rc != 0);
}

TEST_CASE("bad invocations exit nonzero with a one-line diagnostic", "[cli]") {
  const fs::path root = fresh_dir("kinepose_cli_bad");

  CliRun nosub = run_cli("");
  REQUIRE(nosub.rc != 0);

  CliRun missing = run_cli("gen --num 1");
  REQUIRE(missing.rc != 0);
  REQUIRE(missing.out.find("--out") != std::string::npos);

  REQUIRE(run_cli("polish --out x").rc != 0);
  REQUIRE(run_cli("gen --out " + q(root / "ds") + " --num 0").rc != 0);
  REQUIRE(run_cli("gen --out " + q(root / "ds") + " --size 10").rc != 0);

  CliRun nods = run_cli("eval --data " + q(root / "nowhere") + " --ckpt oracle:gt");
  REQUIRE(nods.rc != 0);
  REQUIRE(nods.out.find("nowhere") != std::string::npos);

  CliRun nockpt = run_cli("dump --ckpt " + q(root / "no.kim") + " --data " + q(root / "ds") +
                          " --what attention --out " + q(root / "out"));
  REQUIRE(nockpt.rc != 0);
}
