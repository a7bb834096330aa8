// SPDX-License-Identifier: Apache-2.0
//
// Single entry point for experiments, analyses, and dataset generation.
// Experiments are driven by a JSON config with sections {model, train, task,
// output}; analyses take flags. Exit codes: 0 success, 1 validation error,
// 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "fanformer/analysis.hpp"
#include "fanformer/model.hpp"
#include "fanformer/tasks.hpp"
#include "fanformer/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fanformer;

namespace {

[[noreturn]] void fail_validation(const std::string& msg) {
  throw ConfigError(msg);
}

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& section) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      fail_validation("unknown key '" + it.key() + "' in section '" + section + "'");
}

struct TaskSection {
  std::string kind = "mod_fn";
  int modulus = 5;
  int domain = 10000;
  double train_fraction = 0.9;
  std::uint64_t seed = 0;
  bool regression = false;
  fs::path corpus;
  std::size_t seq_len = 64;
  std::optional<SquareSplit> square;
};

struct ExperimentConfig {
  ModelConfig model;
  OptimConfig optim;
  TrainConfig traincfg;
  TaskSection task;
  fs::path output_dir;
};

void parse_train_section(const json& j, OptimConfig& o, TrainConfig& t) {
  check_keys(j,
             {"peak_lr", "weight_decay", "warmup_steps", "warmup_ratio",
              "total_steps", "min_lr_fraction", "beta1", "beta2", "eps",
              "clip_norm", "batch_size", "seed", "eval_interval",
              "checkpoint_interval"},
             "train");
  if (j.contains("peak_lr")) o.peak_lr = j["peak_lr"];
  if (j.contains("weight_decay")) o.weight_decay = j["weight_decay"];
  if (j.contains("total_steps")) o.total_steps = j["total_steps"];
  if (j.contains("warmup_steps")) o.warmup_steps = j["warmup_steps"];
  if (j.contains("warmup_ratio"))
    o.warmup_steps = static_cast<std::size_t>(
        j["warmup_ratio"].get<double>() * static_cast<double>(o.total_steps));
  if (j.contains("min_lr_fraction")) o.min_lr_fraction = j["min_lr_fraction"];
  if (j.contains("beta1")) o.beta1 = j["beta1"];
  if (j.contains("beta2")) o.beta2 = j["beta2"];
  if (j.contains("eps")) o.eps = j["eps"];
  if (j.contains("clip_norm")) o.clip_norm = j["clip_norm"];
  if (j.contains("batch_size")) t.batch_size = j["batch_size"];
  if (j.contains("seed")) t.seed = j["seed"];
  if (j.contains("eval_interval")) t.eval_interval = j["eval_interval"];
  if (j.contains("checkpoint_interval")) t.checkpoint_interval = j["checkpoint_interval"];
}

json train_section_json(const OptimConfig& o, const TrainConfig& t) {
  return json{{"peak_lr", o.peak_lr},
              {"weight_decay", o.weight_decay},
              {"warmup_steps", o.warmup_steps},
              {"total_steps", o.total_steps},
              {"min_lr_fraction", o.min_lr_fraction},
              {"beta1", o.beta1},
              {"beta2", o.beta2},
              {"eps", o.eps},
              {"clip_norm", o.clip_norm},
              {"batch_size", t.batch_size},
              {"seed", t.seed},
              {"eval_interval", t.eval_interval},
              {"checkpoint_interval", t.checkpoint_interval}};
}

void parse_task_section(const json& j, TaskSection& t) {
  check_keys(j,
             {"kind", "modulus", "domain", "train_fraction", "seed", "regression",
              "corpus", "seq_len", "square"},
             "task");
  if (j.contains("kind")) t.kind = j["kind"];
  if (j.contains("modulus")) t.modulus = j["modulus"];
  if (j.contains("domain")) t.domain = j["domain"];
  if (j.contains("train_fraction")) t.train_fraction = j["train_fraction"];
  if (j.contains("seed")) t.seed = j["seed"];
  if (j.contains("regression")) t.regression = j["regression"];
  if (j.contains("corpus")) t.corpus = j["corpus"].get<std::string>();
  if (j.contains("seq_len")) t.seq_len = j["seq_len"];
  if (j.contains("square")) {
    const json& s = j["square"];
    check_keys(s, {"center_a", "center_b", "side"}, "task.square");
    t.square = SquareSplit{s.value("center_a", 0), s.value("center_b", 0),
                           s.value("side", 0)};
  }
  static const std::set<std::string> kinds = {"mod_fn", "mod_add", "lin_reg", "text"};
  if (!kinds.count(t.kind)) fail_validation("unknown task kind '" + t.kind + "'");
}

json task_section_json(const TaskSection& t) {
  json j{{"kind", t.kind},
         {"modulus", t.modulus},
         {"domain", t.domain},
         {"train_fraction", t.train_fraction},
         {"seed", t.seed},
         {"regression", t.regression},
         {"seq_len", t.seq_len}};
  if (!t.corpus.empty()) j["corpus"] = t.corpus.string();
  if (t.square)
    j["square"] = {{"center_a", t.square->center_a},
                   {"center_b", t.square->center_b},
                   {"side", t.square->side}};
  return j;
}

fs::path output_root() {
  if (const char* env = std::getenv("FANFORMER_OUTPUT_ROOT")) return fs::path(env);
  return fs::path("runs");
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail_validation("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail_validation("config " + path.string() + ": " + e.what());
  }
  check_keys(j, {"model", "train", "task", "output"}, "(root)");
  ExperimentConfig cfg;
  if (j.contains("model")) cfg.model = j["model"].get<ModelConfig>();
  if (j.contains("train")) parse_train_section(j["train"], cfg.optim, cfg.traincfg);
  if (j.contains("task")) parse_task_section(j["task"], cfg.task);
  if (j.contains("output")) {
    check_keys(j["output"], {"dir"}, "output");
    cfg.output_dir = j["output"].value("dir", "run");
  } else {
    cfg.output_dir = "run";
  }
  if (cfg.output_dir.is_relative()) cfg.output_dir = output_root() / cfg.output_dir;
  return cfg;
}

json resolved_config_json(const ExperimentConfig& cfg) {
  json model_j = cfg.model;
  return json{{"model", model_j},
              {"train", train_section_json(cfg.optim, cfg.traincfg)},
              {"task", task_section_json(cfg.task)},
              {"output", {{"dir", cfg.output_dir.string()}}}};
}

struct LoadedTask {
  std::optional<TaskDataset> arith;
  std::optional<TextDataset> text;
  std::vector<Sample> train_samples, eval_samples;
  std::size_t vocab_size = 0;
};

LoadedTask load_task(const TaskSection& t) {
  LoadedTask out;
  if (t.kind == "text") {
    if (t.corpus.empty()) fail_validation("task.corpus required for kind 'text'");
    out.text = load_text_corpus(t.corpus, t.seq_len);
    out.train_samples = samples_of_windows(*out.text, out.text->train_windows);
    out.eval_samples = samples_of_windows(*out.text, out.text->val_windows);
    out.vocab_size = out.text->vocab.size();
    return out;
  }
  TaskDataset d;
  if (t.kind == "mod_fn")
    d = gen_mod_function(t.modulus, t.domain, t.train_fraction, t.seed, t.regression);
  else if (t.kind == "mod_add")
    d = gen_modular_addition();
  else
    d = gen_linear_regression();
  if (t.square) leave_square_out(d, t.square->center_a, t.square->center_b, t.square->side);
  out.train_samples = samples_of(d, d.train_idx);
  out.eval_samples = samples_of(d, d.test_idx);
  out.vocab_size = d.vocab.size();
  out.arith = std::move(d);
  return out;
}

void save_final(const fs::path& path, Model& model, AdamW& optim, long long step) {
  Checkpoint ckpt;
  ckpt.config = model.config;
  for (auto& [name, t] : model.named_parameters()) ckpt.tensors.emplace(name, *t);
  for (auto& [name, t] : optim.state()) ckpt.tensors.emplace(name, t);
  ckpt.meta["step"] = std::to_string(step);
  ckpt.meta["optim_steps"] = std::to_string(optim.steps_taken());
  save_checkpoint(path, ckpt);
}

// Runs one experiment into out_dir; shared by `train` and `compare`.
TrainResult run_experiment(ExperimentConfig cfg, const fs::path& out_dir, bool resume) {
  fs::create_directories(out_dir);
  LoadedTask task = load_task(cfg.task);
  if (cfg.model.vocab_size < task.vocab_size) cfg.model.vocab_size = task.vocab_size;
  cfg.model.validate();

  std::ofstream cfg_out(out_dir / "config.json");
  cfg_out << resolved_config_json(cfg).dump(2) << '\n';
  cfg_out.close();

  fs::path ckpt_path = out_dir / "checkpoint.ckpt";
  cfg.traincfg.checkpoint_path = ckpt_path;
  cfg.traincfg.regression = cfg.task.regression;

  Model model = build(cfg.model);
  AdamW optim(model.named_parameters(), cfg.optim);
  if (resume) {
    if (!fs::exists(ckpt_path))
      fail_validation("resume: no checkpoint at " + ckpt_path.string());
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    model = model_from_checkpoint(ckpt);
    optim = AdamW(model.named_parameters(), cfg.optim);
    optim.restore(ckpt.tensors, std::stoull(ckpt.meta.at("optim_steps")));
    cfg.traincfg.start_step = std::stoull(ckpt.meta.at("step"));
  }

  MetricsWriter writer(out_dir / "metrics.jsonl", out_dir / "metrics.csv", resume);
  EvalHook hook;
  if (!task.eval_samples.empty())
    hook = [&](Model& m, long long) -> std::optional<std::pair<std::string, double>> {
      return std::make_pair(std::string("val_loss"),
                            eval_loss(m, task.eval_samples, cfg.task.regression));
    };

  TrainResult result = train(model, task.train_samples, cfg.optim, cfg.traincfg,
                             &writer, hook);
  save_final(ckpt_path, model, optim, result.final_step);
  return result;
}

int cmd_train(const std::string& config_path, bool resume) {
  ExperimentConfig cfg = load_experiment(config_path);
  TrainResult r = run_experiment(cfg, cfg.output_dir, resume);
  std::cout << "final step " << r.final_step << " loss " << r.final_loss << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& config_path) {
  ExperimentConfig cfg = load_experiment(config_path);
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  Model model = model_from_checkpoint(ckpt);
  LoadedTask task = load_task(cfg.task);
  double train_l = eval_loss(model, task.train_samples, cfg.task.regression);
  std::cout << "train_loss " << train_l << '\n';
  if (!task.eval_samples.empty())
    std::cout << "eval_loss "
              << eval_loss(model, task.eval_samples, cfg.task.regression) << '\n';
  return 0;
}

int cmd_compare(const std::string& config_path) {
  ExperimentConfig cfg = load_experiment(config_path);
  ExperimentConfig base = cfg;
  base.model.variant = Variant::transformer;

  ExperimentConfig fan = cfg;
  fan.model = match_params(base.model, Variant::fanformer);

  fs::create_directories(cfg.output_dir);
  TrainResult rt = run_experiment(base, cfg.output_dir / "transformer", false);
  TrainResult rf = run_experiment(fan, cfg.output_dir / "fanformer", false);

  std::ofstream side(cfg.output_dir / "compare.csv");
  side << "step,transformer_loss,fanformer_loss\n";
  side.precision(17);
  std::size_t n = std::min(rt.records.size(), rf.records.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (rt.records[i].split != "train" || rf.records[i].split != "train") continue;
    side << rt.records[i].step << ',' << rt.records[i].loss << ','
         << rf.records[i].loss << '\n';
  }
  std::cout << "transformer final loss " << rt.final_loss << '\n'
            << "fanformer   final loss " << rf.final_loss << '\n';
  return 0;
}

int cmd_heatmap(const std::string& ckpt_path, const std::string& task_kind,
                int center_a, int center_b, int side, int samples,
                double temperature, std::uint64_t seed, const std::string& out) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  Model model = model_from_checkpoint(ckpt);
  TaskDataset d = task_kind == "mod_add" ? gen_modular_addition()
                                         : gen_linear_regression();
  leave_square_out(d, center_a, center_b, side);
  HeatmapResult r = heatmap_eval(model, d, samples, temperature, seed);
  write_heatmap_csv(r, out);
  std::cout << "train_accuracy " << r.train_accuracy << '\n'
            << "test_accuracy " << r.test_accuracy << '\n';
  return 0;
}

int cmd_sweep_p(const std::string& config_path, const std::vector<double>& p_values) {
  ExperimentConfig cfg = load_experiment(config_path);
  LoadedTask task = load_task(cfg.task);
  if (cfg.model.vocab_size < task.vocab_size) cfg.model.vocab_size = task.vocab_size;

  SweepConfig sweep;
  sweep.base = cfg.model;
  sweep.base.variant = Variant::transformer;
  sweep.optim = cfg.optim;
  sweep.train = cfg.traincfg;
  sweep.p_values = p_values;
  auto rows = sweep_p(sweep, task.train_samples, task.eval_samples);

  fs::create_directories(cfg.output_dir);
  std::ofstream out(cfg.output_dir / "sweep_p.csv");
  out << "p,final_train_loss,eval_metric\n";
  out.precision(17);
  for (const SweepRow& r : rows)
    out << r.p << ',' << r.final_train_loss << ',' << r.eval_metric << '\n';
  std::cout << "wrote " << (cfg.output_dir / "sweep_p.csv").string() << '\n';
  return 0;
}

int cmd_flops(long long L, long long S, long long D, long long V,
              const std::string& mode, double p) {
  FlopsMode m = mode == "same_dim" ? FlopsMode::same_dim : FlopsMode::same_param;
  if (mode != "same_dim" && mode != "same_param")
    fail_validation("unknown flops mode '" + mode + "'");
  std::cout << flops_csv_header() << '\n'
            << flops_csv_row(count_flops(Variant::transformer, L, S, D, V, m, p)) << '\n'
            << flops_csv_row(count_flops(Variant::fanformer, L, S, D, V, m, p)) << '\n';
  return 0;
}

int cmd_lipschitz(const std::string& family, const std::vector<std::size_t>& depths,
                  std::size_t width, std::size_t samples, std::uint64_t seed,
                  const std::string& out) {
  LipschitzFamily fam;
  if (family == "mlp")
    fam = LipschitzFamily::mlp;
  else if (family == "transformer")
    fam = LipschitzFamily::transformer;
  else if (family == "fanformer")
    fam = LipschitzFamily::fanformer;
  else if (family == "linear")
    fam = LipschitzFamily::linear;
  else
    fail_validation("unknown family '" + family + "'");
  LipschitzConfig cfg;
  cfg.width = width;
  cfg.samples = samples;
  cfg.seed = seed;
  auto rows = estimate_lipschitz(fam, depths, cfg);
  std::ostream* os = &std::cout;
  std::ofstream file;
  if (!out.empty()) {
    file.open(out);
    os = &file;
  }
  *os << lipschitz_csv_header() << '\n';
  for (const auto& r : rows) *os << lipschitz_csv_row(r) << '\n';
  return 0;
}

int cmd_equiv(std::size_t d_h, std::size_t heads, std::size_t l, int trials,
              double tol, std::uint64_t seed) {
  EquivReport r = check_atf_equivalence(d_h, l, heads, trials, tol, seed);
  std::cout << "trials " << r.trials << " max deviation " << r.max_deviation
            << " tolerance " << r.tolerance << '\n'
            << (r.pass ? "PASS" : "FAIL") << '\n';
  if (!r.pass) {
    std::cerr << "equivalence check failed at seed " << r.worst_seed << '\n';
    return 2;
  }
  return 0;
}

int cmd_gen_data(const std::string& kind, const std::string& out, int modulus,
                 int domain, double train_fraction, std::uint64_t seed,
                 int center_a, int center_b, int side) {
  TaskDataset d;
  if (kind == "mod_add")
    d = gen_modular_addition();
  else if (kind == "lin_reg")
    d = gen_linear_regression();
  else if (kind == "mod_fn")
    d = gen_mod_function(modulus, domain, train_fraction, seed);
  else
    fail_validation("unknown task kind '" + kind + "'");
  if (side > 0) leave_square_out(d, center_a, center_b, side);
  export_jsonl(d, out);
  std::cout << "wrote " << d.samples.size() << " samples to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FANformer experiments and analyses"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, out_path, task_kind = "lin_reg";
  bool resume = false;

  auto* train_cmd = app.add_subcommand("train", "run one experiment from a JSON config");
  train_cmd->add_option("--config", config_path, "experiment config JSON")->required();
  train_cmd->add_flag("--resume", resume, "continue from the run's checkpoint");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a task");
  eval_cmd->add_option("--checkpoint", ckpt_path)->required();
  eval_cmd->add_option("--config", config_path, "config providing the task section")
      ->required();

  auto* compare_cmd =
      app.add_subcommand("compare", "paired transformer vs matched fanformer run");
  compare_cmd->add_option("--config", config_path)->required();

  int center_a = 50, center_b = 50, side = 20, hm_samples = 10;
  double temperature = 0.5;
  std::uint64_t seed = 1;
  auto* heatmap_cmd = app.add_subcommand("heatmap", "per-point generation accuracy grid");
  heatmap_cmd->add_option("--checkpoint", ckpt_path)->required();
  heatmap_cmd->add_option("--task", task_kind, "mod_add or lin_reg");
  heatmap_cmd->add_option("--center-a", center_a);
  heatmap_cmd->add_option("--center-b", center_b);
  heatmap_cmd->add_option("--side", side);
  heatmap_cmd->add_option("--samples", hm_samples);
  heatmap_cmd->add_option("--temperature", temperature);
  heatmap_cmd->add_option("--seed", seed);
  heatmap_cmd->add_option("--out", out_path, "output CSV")->required();

  std::vector<double> p_values = {0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45};
  auto* sweep_cmd = app.add_subcommand("sweep-p", "matched fanformer per p value");
  sweep_cmd->add_option("--config", config_path)->required();
  sweep_cmd->add_option("--p", p_values, "p values to sweep");

  long long L = 16, S = 2048, D = 2048, V = 50304;
  std::string mode = "same_param";
  double p = 0.25;
  auto* flops_cmd = app.add_subcommand("flops", "closed-form FLOPs table rows");
  flops_cmd->add_option("--L", L);
  flops_cmd->add_option("--S", S);
  flops_cmd->add_option("--D", D);
  flops_cmd->add_option("--V", V);
  flops_cmd->add_option("--mode", mode, "same_param or same_dim");
  flops_cmd->add_option("--p", p);

  std::string family = "mlp";
  std::vector<std::size_t> depths = {1, 2, 4, 8};
  std::size_t width = 32, lip_samples = 1000;
  auto* lip_cmd = app.add_subcommand("lipschitz", "sampled Lipschitz estimates");
  lip_cmd->add_option("--family", family, "mlp, transformer, fanformer, linear");
  lip_cmd->add_option("--depths", depths);
  lip_cmd->add_option("--width", width);
  lip_cmd->add_option("--samples", lip_samples);
  lip_cmd->add_option("--seed", seed);
  lip_cmd->add_option("--out", out_path, "output CSV (stdout if omitted)");

  std::size_t d_h = 16, heads = 4, l = 8;
  int trials = 100;
  double tol = 1e-12;
  auto* equiv_cmd = app.add_subcommand("equiv-check", "fused ATF vs explicit composition");
  equiv_cmd->add_option("--dh", d_h);
  equiv_cmd->add_option("--heads", heads);
  equiv_cmd->add_option("--l", l);
  equiv_cmd->add_option("--trials", trials);
  equiv_cmd->add_option("--tol", tol);
  equiv_cmd->add_option("--seed", seed);

  int modulus = 5, domain = 10000;
  double train_fraction = 0.9;
  auto* gen_cmd = app.add_subcommand("gen-data", "write a task dataset as JSONL");
  gen_cmd->add_option("--task", task_kind, "mod_add, lin_reg, mod_fn")->required();
  gen_cmd->add_option("--out", out_path)->required();
  gen_cmd->add_option("--modulus", modulus);
  gen_cmd->add_option("--domain", domain);
  gen_cmd->add_option("--train-fraction", train_fraction);
  gen_cmd->add_option("--seed", seed);
  gen_cmd->add_option("--center-a", center_a);
  gen_cmd->add_option("--center-b", center_b);
  int gen_side = 0;
  gen_cmd->add_option("--side", gen_side, "leave-square-out side (0 = no split)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, resume);
    if (eval_cmd->parsed()) return cmd_eval(ckpt_path, config_path);
    if (compare_cmd->parsed()) return cmd_compare(config_path);
    if (heatmap_cmd->parsed())
      return cmd_heatmap(ckpt_path, task_kind, center_a, center_b, side, hm_samples,
                         temperature, seed, out_path);
    if (sweep_cmd->parsed()) return cmd_sweep_p(config_path, p_values);
    if (flops_cmd->parsed()) return cmd_flops(L, S, D, V, mode, p);
    if (lip_cmd->parsed())
      return cmd_lipschitz(family, depths, width, lip_samples, seed, out_path);
    if (equiv_cmd->parsed()) return cmd_equiv(d_h, heads, l, trials, tol, seed);
    if (gen_cmd->parsed())
      return cmd_gen_data(task_kind, out_path, modulus, domain, train_fraction, seed,
                          center_a, center_b, gen_side);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const SplitError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
