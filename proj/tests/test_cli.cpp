// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const char* kCli = FANFORMER_CLI_PATH;

struct CmdResult {
  int exit_code = -1;
  std::string output;
};

CmdResult run(const std::string& args) {
  fs::path tmp = fs::temp_directory_path() / "ff_cli_out.txt";
  std::string cmd = std::string(kCli) + " " + args + " >" + tmp.string() + " 2>&1";
  int raw = std::system(cmd.c_str());
  CmdResult r;
  r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(tmp);
  r.output.assign(std::istreambuf_iterator<char>(in), {});
  return r;
}

fs::path scratch() {
  fs::path dir = fs::temp_directory_path() / "ff_cli_test";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("equiv-check passes and reports deviation") {
  CmdResult r = run("equiv-check --dh 16 --heads 4 --trials 10");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("PASS") != std::string::npos);
  CHECK(r.output.find("max deviation") != std::string::npos);
}

TEST_CASE("flops emits matching same-param totals") {
  CmdResult r = run("flops --L 2 --S 64 --D 128 --V 100 --mode same_param");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("variant,mode,L,S,D,V") != std::string::npos);
  // both rows present
  CHECK(r.output.find("transformer") != std::string::npos);
  CHECK(r.output.find("fanformer") != std::string::npos);
}

TEST_CASE("missing config file exits 1 and names the path") {
  CmdResult r = run("train --config /nonexistent/missing.json");
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("missing.json") != std::string::npos);
}

TEST_CASE("unknown config key exits 1 and names the key") {
  fs::path dir = scratch();
  fs::path cfg = dir / "bad.json";
  std::ofstream(cfg) << R"({"model": {"d_h": 8}, "typo_section": {}})";
  CmdResult r = run("train --config " + cfg.string());
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("typo_section") != std::string::npos);
}

TEST_CASE("train writes config, metrics, and a checkpoint") {
  fs::path dir = scratch();
  fs::path out = dir / "run1";
  fs::remove_all(out);
  fs::path cfg = dir / "train.json";
  std::ofstream(cfg) << nlohmann::json{
      {"model",
       {{"variant", "fanformer"}, {"d_h", 8}, {"n_layers", 1}, {"heads", 2},
        {"d_f", 16}, {"vocab_size", 16}, {"max_seq_len", 16}, {"seed", 1}}},
      {"train",
       {{"peak_lr", 1e-3}, {"total_steps", 5}, {"warmup_steps", 1},
        {"batch_size", 4}, {"seed", 2}, {"eval_interval", 5}}},
      {"task", {{"kind", "mod_fn"}, {"modulus", 5}, {"domain", 100},
                {"train_fraction", 0.8}, {"seed", 3}}},
      {"output", {{"dir", out.string()}}}}.dump();
  CmdResult r = run("train --config " + cfg.string());
  CHECK_MESSAGE(r.exit_code == 0, r.output);
  CHECK(fs::exists(out / "config.json"));
  CHECK(fs::exists(out / "metrics.jsonl"));
  CHECK(fs::exists(out / "metrics.csv"));
  CHECK(fs::exists(out / "checkpoint.ckpt"));

  // resolved config expands defaults
  std::ifstream in(out / "config.json");
  auto j = nlohmann::json::parse(in);
  CHECK(j["train"]["beta2"] == 0.95);
  CHECK(j["model"]["p"] == 0.25);

  // metrics stream has one train record per step
  std::ifstream mj(out / "metrics.jsonl");
  std::string line;
  int train_lines = 0, eval_lines = 0;
  while (std::getline(mj, line)) {
    auto rec = nlohmann::json::parse(line);
    if (rec["split"] == "train") ++train_lines;
    if (rec["split"] == "eval") ++eval_lines;
  }
  CHECK(train_lines == 5);
  CHECK(eval_lines == 1);

  // eval subcommand reads the checkpoint back
  CmdResult ev = run("eval --checkpoint " + (out / "checkpoint.ckpt").string() +
                     " --config " + cfg.string());
  CHECK_MESSAGE(ev.exit_code == 0, ev.output);
  CHECK(ev.output.find("train_loss") != std::string::npos);
}

TEST_CASE("gen-data writes JSONL") {
  fs::path dir = scratch();
  fs::path out = dir / "modfn.jsonl";
  CmdResult r = run("gen-data --task mod_fn --out " + out.string() +
                    " --modulus 5 --domain 50");
  CHECK_MESSAGE(r.exit_code == 0, r.output);
  std::ifstream in(out);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  CHECK(n == 50);
}

TEST_CASE("lipschitz prints the CSV schema") {
  CmdResult r = run("lipschitz --family linear --depths 1 --width 8 --samples 50");
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("family,depth,scale,samples,L_hat,seed") != std::string::npos);
}

TEST_SUITE_END();
