#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#ifndef SESSREC_CLI_PATH
#error "SESSREC_CLI_PATH must point at the built CLI binary"
#endif

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr interleaved
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(SESSREC_CLI_PATH) + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe) != nullptr) r.output += buf.data();
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("sessrec_cli_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

// Deterministic per-user shift walks: learnable and quick to prepare.
void write_events(const std::string& path, int users = 12, int sessions = 9, int len = 5,
                  int items = 30) {
  std::ofstream os(path);
  os << "# synthetic interaction log\n";
  for (int u = 0; u < users; ++u) {
    long t = 1'000'000 + u;
    const int shift = 1 + u % 9;
    int v = (u * 7) % items;
    for (int s = 0; s < sessions; ++s) {
      t += 86'400;
      for (int k = 0; k < len; ++k) {
        os << "user" << u << "\titem" << v << '\t' << t << '\n';
        t += 60;
        v = (v + shift) % items;
      }
    }
  }
}

std::string grep_line(const std::string& text, const std::string& needle) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (line.find(needle) != std::string::npos) return line;
  return {};
}

}  // namespace

TEST_CASE("prepare writes corpus files and a stats report") {
  TempDir tmp;
  write_events(tmp / "events.tsv");
  auto r = run("prepare --input " + (tmp / "events.tsv") + " --output " + (tmp / "corpus") +
               " --valid-frac 0.1");
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  // defaults echoed: 30-minute idle, length >= 3, at least 5 sessions per user
  REQUIRE(r.output.find("idle_minutes=30") != std::string::npos);
  REQUIRE(r.output.find("min_session_len=3") != std::string::npos);
  REQUIRE(r.output.find("min_user_sessions=5") != std::string::npos);
  REQUIRE(fs::exists(tmp / "corpus/train.json"));
  REQUIRE(fs::exists(tmp / "corpus/valid.json"));
  REQUIRE(fs::exists(tmp / "corpus/test.json"));
  REQUIRE(fs::exists(tmp / "corpus/stats.csv"));

  std::ifstream stats(tmp / "corpus/stats.csv");
  std::string header;
  std::getline(stats, header);
  REQUIRE(header == "stat,value");
}

TEST_CASE("prepare reddit preset switches the idle threshold to 60 minutes") {
  TempDir tmp;
  write_events(tmp / "events.tsv");
  auto r = run("prepare --input " + (tmp / "events.tsv") + " --output " + (tmp / "corpus") +
               " --preset reddit");
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.output.find("idle_minutes=60") != std::string::npos);
}

TEST_CASE("unreadable input exits with the data error code") {
  TempDir tmp;
  auto r = run("prepare --input " + (tmp / "missing.tsv") + " --output " + (tmp / "corpus"));
  REQUIRE(r.exit_code == 2);
}

TEST_CASE("zero survivors after filtering exits with the data error code") {
  TempDir tmp;
  {
    std::ofstream os(tmp / "thin.tsv");  // every session is far below the length-3 floor
    os << "u1\ti1\t100\nu1\ti2\t9000000\nu2\ti1\t50\n";
  }
  auto r = run("prepare --input " + (tmp / "thin.tsv") + " --output " + (tmp / "corpus"));
  REQUIRE(r.exit_code == 2);
  REQUIRE(r.output.find("no sessions survive") != std::string::npos);
}

TEST_CASE("missing required flags exit with the usage code") {
  auto r = run("train --out /tmp/x.ckpt");
  REQUIRE(r.exit_code == 1);
  auto r2 = run("definitely-not-a-command");
  REQUIRE(r2.exit_code == 1);
}

TEST_CASE("help exits cleanly and documents the flags") {
  auto r = run("--help");
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.output.find("prepare") != std::string::npos);
  auto r2 = run("eval --help");
  REQUIRE(r2.exit_code == 0);
  REQUIRE(r2.output.find("--last-click-only") != std::string::npos);
}

TEST_CASE("train, eval, and rerun behave reproducibly") {
  TempDir tmp;
  write_events(tmp / "events.tsv");
  REQUIRE(run("prepare --input " + (tmp / "events.tsv") + " --output " + (tmp / "corpus")).exit_code == 0);

  const std::string train_flags = " --dim-item 12 --dim-user 6 --epochs 2 --batch-size 32 "
                                  "--max-hist-sessions 3 --lr 0.01 --seed 5";
  auto t1 = run("train --data " + (tmp / "corpus") + " --out " + (tmp / "a.ckpt") + train_flags);
  CAPTURE(t1.output);
  REQUIRE(t1.exit_code == 0);
  REQUIRE(fs::exists(tmp / "a.ckpt"));
  REQUIRE(fs::exists(tmp / "a.ckpt.log"));

  // same seed, same epoch-1 loss line
  auto t2 = run("train --data " + (tmp / "corpus") + " --out " + (tmp / "b.ckpt") + train_flags);
  REQUIRE(grep_line(t1.output, "epoch 1 ") == grep_line(t2.output, "epoch 1 "));

  // ablation flag lands in the echoed config
  auto t3 = run("train --data " + (tmp / "corpus") + " --out " + (tmp / "c.ckpt") + train_flags +
                " --ablation no-attention --epochs 1");
  REQUIRE(t3.exit_code == 0);
  REQUIRE(t3.output.find("use_history_attention=false") != std::string::npos);

  // eval: K list parsed, CSV written, rerun bitwise identical
  auto e1 = run("eval --checkpoint " + (tmp / "a.ckpt") + " --data " + (tmp / "corpus") +
                " --k 5,10,20 --out " + (tmp / "m1.csv"));
  CAPTURE(e1.output);
  REQUIRE(e1.exit_code == 0);
  REQUIRE(e1.output.find("recall@5 ") != std::string::npos);
  REQUIRE(e1.output.find("recall@10 ") != std::string::npos);
  REQUIRE(e1.output.find("recall@20 ") != std::string::npos);
  auto e2 = run("eval --checkpoint " + (tmp / "a.ckpt") + " --data " + (tmp / "corpus") +
                " --k 5,10,20 --out " + (tmp / "m2.csv"));
  REQUIRE(e2.exit_code == 0);
  std::ifstream f1(tmp / "m1.csv"), f2(tmp / "m2.csv");
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  REQUIRE(s1.str() == s2.str());
  REQUIRE_FALSE(s1.str().empty());

  // last-click-only scores one instance per test session
  auto e3 = run("eval --checkpoint " + (tmp / "a.ckpt") + " --data " + (tmp / "corpus") +
                " --k 5 --last-click-only");
  REQUIRE(e3.exit_code == 0);
  const auto all_line = grep_line(e1.output, "instances ");
  const auto last_line = grep_line(e3.output, "instances ");
  REQUIRE(all_line != last_line);
}

TEST_CASE("an untrained model scores near random-rank recall") {
  TempDir tmp;
  write_events(tmp / "events.tsv");
  REQUIRE(run("prepare --input " + (tmp / "events.tsv") + " --output " + (tmp / "corpus")).exit_code == 0);
  auto t = run("train --data " + (tmp / "corpus") + " --out " + (tmp / "u.ckpt") +
               " --dim-item 12 --dim-user 6 --epochs 0 --seed 11");
  REQUIRE(t.exit_code == 0);
  auto e = run("eval --checkpoint " + (tmp / "u.ckpt") + " --data " + (tmp / "corpus") + " --k 5");
  REQUIRE(e.exit_code == 0);
  // 30 items: expectation is 5/30 ~ 0.17 under random ranks
  const auto line = grep_line(e.output, "recall@5 ");
  const double recall = std::stod(line.substr(line.find("recall@5 ") + 9));
  REQUIRE(recall > 0.03);
  REQUIRE(recall < 0.45);
}

TEST_CASE("splits share one vocabulary even when items only occur in the validation carve") {
  TempDir tmp;
  {
    std::ofstream os(tmp / "events.tsv");
    for (int u = 0; u < 6; ++u) {
      long t = 1'000'000;
      for (int s = 0; s < 10; ++s) {
        t += 86'400;
        for (int k = 0; k < 4; ++k) {
          // rare items appear only in session 8, which lands in the valid carve
          if (s == 7 && k == 2) os << 'u' << u << "\trare" << u << '\t' << t << '\n';
          else os << 'u' << u << "\tit" << (u * 3 + s + k) % 12 << '\t' << t << '\n';
          t += 30;
        }
      }
    }
  }
  REQUIRE(run("prepare --input " + (tmp / "events.tsv") + " --output " + (tmp / "corpus") +
              " --valid-frac 0.1")
              .exit_code == 0);
  REQUIRE(run("train --data " + (tmp / "corpus") + " --out " + (tmp / "m.ckpt") +
              " --dim-item 8 --dim-user 4 --epochs 1")
              .exit_code == 0);
  for (const char* split : {"test", "valid"}) {
    auto e = run("eval --checkpoint " + (tmp / "m.ckpt") + " --data " + (tmp / "corpus") +
                 " --split " + split + " --k 5");
    CAPTURE(split, e.output);
    REQUIRE(e.exit_code == 0);
  }
}

TEST_CASE("evaluating a checkpoint against a mismatched vocabulary is an explicit error") {
  TempDir tmp;
  write_events(tmp / "a.tsv", 12, 9, 5, 30);
  write_events(tmp / "b.tsv", 12, 9, 5, 22);  // different item vocabulary
  REQUIRE(run("prepare --input " + (tmp / "a.tsv") + " --output " + (tmp / "ca")).exit_code == 0);
  REQUIRE(run("prepare --input " + (tmp / "b.tsv") + " --output " + (tmp / "cb")).exit_code == 0);
  REQUIRE(run("train --data " + (tmp / "ca") + " --out " + (tmp / "a.ckpt") +
              " --dim-item 8 --dim-user 4 --epochs 1")
              .exit_code == 0);
  auto r = run("eval --checkpoint " + (tmp / "a.ckpt") + " --data " + (tmp / "cb") + " --k 5");
  REQUIRE(r.exit_code == 2);
  REQUIRE(r.output.find("mismatch") != std::string::npos);
}

TEST_CASE("config file keys are honored and unknown keys rejected") {
  TempDir tmp;
  write_events(tmp / "events.tsv");
  REQUIRE(run("prepare --input " + (tmp / "events.tsv") + " --output " + (tmp / "corpus")).exit_code == 0);

  {
    std::ofstream cfg(tmp / "good.cfg");
    cfg << "# hyperparameters\ndim_item = 10\nepochs = 1\ndim_user=5\n";
  }
  auto ok = run("train --data " + (tmp / "corpus") + " --out " + (tmp / "x.ckpt") + " --config " +
                (tmp / "good.cfg"));
  REQUIRE(ok.exit_code == 0);
  REQUIRE(ok.output.find("config dim_item=10") != std::string::npos);

  {
    std::ofstream cfg(tmp / "bad.cfg");
    cfg << "dim_item=10\nnot_a_key=3\n";
  }
  auto bad = run("train --data " + (tmp / "corpus") + " --out " + (tmp / "y.ckpt") + " --config " +
                 (tmp / "bad.cfg"));
  REQUIRE(bad.exit_code == 1);
  REQUIRE(bad.output.find("not_a_key") != std::string::npos);

  // flags override the file
  auto over = run("train --data " + (tmp / "corpus") + " --out " + (tmp / "z.ckpt") + " --config " +
                  (tmp / "good.cfg") + " --dim-item 14 --epochs 1");
  REQUIRE(over.exit_code == 0);
  REQUIRE(over.output.find("config dim_item=14") != std::string::npos);
}

TEST_CASE("gradcheck passes, reports per-parameter errors, and catches injected faults") {
  auto ok = run("gradcheck --seeds 1");
  CAPTURE(ok.output);
  REQUIRE(ok.exit_code == 0);
  REQUIRE(ok.output.find("PASS") != std::string::npos);
  REQUIRE(ok.output.find("gru_wc") != std::string::npos);  // per-parameter lines

  auto fault = run("gradcheck --seeds 1 --inject-fault gru-candidate-sign");
  REQUIRE(fault.exit_code == 3);
  REQUIRE(fault.output.find("FAIL") != std::string::npos);

  auto f32 = run("gradcheck --seeds 1 --precision 32");
  REQUIRE(f32.output.find("tolerance") != std::string::npos);
  REQUIRE(f32.output.find("1e-2") + f32.output.find("0.01") != 2 * std::string::npos);
}
