// Subprocess tests for the command-line tool.  The binary path arrives via
// the ATTNLAB_BIN environment variable (set by ctest); without it the suite
// skips instead of failing, so the test binary stays runnable on its own.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "attnlab/io.hpp"

using namespace attnlab;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// call first in every test case: SKIP must fire outside assertion expressions
std::string cli_binary() {
  const char* bin = std::getenv("ATTNLAB_BIN");
  if (!bin || !*bin) SKIP("ATTNLAB_BIN not set; run through ctest");
  return bin;
}

struct RunResult {
  int exit_code = -1;
  std::string out;  // stdout only unless the command redirects
};

RunResult run(const std::string& cmd) {
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string quiet(const std::string& bin, const std::string& args) {
  return bin + " " + args + " 2>/dev/null";
}
std::string merged(const std::string& bin, const std::string& args) {
  return bin + " " + args + " 2>&1";
}

}  // namespace

TEST_CASE("usage errors exit with code one and help with zero", "[cli]") {
  const std::string bin = cli_binary();
  REQUIRE(run(quiet(bin, "no-such-command")).exit_code == 1);
  REQUIRE(run(quiet(bin, "")).exit_code == 1);                       // subcommand is mandatory
  REQUIRE(run(quiet(bin, "decode --beam 4")).exit_code == 1);        // required flags missing
  REQUIRE(run(quiet(bin, "wer --ref a --hyp b --bogus c")).exit_code == 1);

  RunResult help = run(quiet(bin, "--help"));
  REQUIRE(help.exit_code == 0);
  REQUIRE(help.out.find("decode") != std::string::npos);
  REQUIRE(help.out.find("make-toy-data") != std::string::npos);
}

TEST_CASE("a missing checkpoint is reported with its path and exit code two", "[cli]") {
  const std::string bin = cli_binary();
  auto dir = temp_dir("attnlab_cli_missing");
  std::string ckpt = (dir / "missing.ckpt").string();
  RunResult r = run(merged(bin, "decode --checkpoint " + ckpt +
                           " --manifest no.tsv --merges no.merges --vocab no.vocab"));
  REQUIRE(r.exit_code == 2);
  REQUIRE(r.out.find("missing.ckpt") != std::string::npos);
}

TEST_CASE("wer prints a fixed four-decimal rate", "[cli]") {
  const std::string bin = cli_binary();
  auto dir = temp_dir("attnlab_cli_wer");
  std::string ref = (dir / "ref.txt").string();
  std::string hyp = (dir / "hyp.txt").string();
  write_file(ref, "hello world\nfoo bar baz\n");

  write_file(hyp, "hello world\nfoo bar baz\n");
  RunResult same = run(quiet(bin, "wer --ref " + ref + " --hyp " + hyp));
  REQUIRE(same.exit_code == 0);
  REQUIRE(same.out == "wer=0.0000\n");

  write_file(hyp, "hello there\nfoo bar baz\n");  // 1 substitution / 5 reference words
  REQUIRE(run(quiet(bin, "wer --ref " + ref + " --hyp " + hyp)).out == "wer=0.2000\n");

  write_file(hyp, "one line only\n");
  RunResult bad = run(merged(bin, "wer --ref " + ref + " --hyp " + hyp));
  REQUIRE(bad.exit_code == 2);
  REQUIRE(bad.out.find("2 lines") != std::string::npos);
}

TEST_CASE("toy data generation is deterministic across runs", "[cli]") {
  const std::string bin = cli_binary();
  auto dir = temp_dir("attnlab_cli_toy");
  std::string a = (dir / "a").string(), b = (dir / "b").string();
  REQUIRE(run(quiet(bin, "make-toy-data --out " + a + " --train 4 --dev 2 --seed 7")).exit_code == 0);
  RunResult second = run(quiet(bin, "make-toy-data --out " + b + " --train 4 --dev 2 --seed 7"));
  REQUIRE(second.exit_code == 0);
  REQUIRE(second.out.find("train_manifest=") != std::string::npos);

  // manifests hold paths relative to their own directory, so bytes must match
  for (const char* name : {"train.tsv", "dev.tsv", "lm_corpus.txt"})
    REQUIRE(read_file(a + "/" + name) == read_file(b + "/" + name));
  size_t wavs = 0;
  for (const auto& e : std::filesystem::directory_iterator(a + "/wav")) {
    std::string name = e.path().filename().string();
    REQUIRE(read_file(e.path().string()) == read_file(b + "/wav/" + name));
    ++wavs;
  }
  REQUIRE(wavs == 6);

  std::string other = (dir / "c").string();
  REQUIRE(run(quiet(bin, "make-toy-data --out " + other + " --train 4 --dev 2 --seed 8")).exit_code ==
          0);
  REQUIRE(read_file(a + "/lm_corpus.txt") != read_file(other + "/lm_corpus.txt"));
}

TEST_CASE("bpe segmentation round-trips through the continuation marker", "[cli]") {
  const std::string bin = cli_binary();
  auto dir = temp_dir("attnlab_cli_bpe");
  std::string corpus = (dir / "corpus.txt").string();
  write_file(corpus, "the cat sat\nthe dog ran far\ncat and dog\n");
  std::string m = (dir / "toy.merges").string(), v = (dir / "toy.vocab").string();
  REQUIRE(run(quiet(bin, "bpe-learn --corpus " + corpus + " --merges " + m + " --vocab " + v +
                    " --num-merges 20"))
              .exit_code == 0);

  std::string seg = (dir / "seg.txt").string();
  REQUIRE(run(quiet(bin, "bpe-apply --merges " + m + " --vocab " + v + " --in " + corpus + " --out " +
                    seg))
              .exit_code == 0);

  // deleting every "@@ " restores the original normalized text
  std::string text = read_file(seg);
  size_t at;
  while ((at = text.find("@@ ")) != std::string::npos) text.erase(at, 3);
  REQUIRE(text == read_file(corpus));
}
