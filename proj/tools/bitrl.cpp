// bitrl command-line tool: quantize, train, eval, bench, verify, report.
//
// Exit codes: 0 success, 1 usage, 2 runtime failure, 3 assertion failed.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bitrl/backbone.hpp"
#include "bitrl/checkpoint.hpp"
#include "bitrl/kernels.hpp"
#include "bitrl/ppo.hpp"
#include "bitrl/report.hpp"
#include "bitrl/theory.hpp"

#ifndef BITRL_GIT_DESCRIBE
#define BITRL_GIT_DESCRIBE "unknown"
#endif

namespace {

using namespace bitrl;
using json = nlohmann::ordered_json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitAssert = 3;

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t hash_text(const std::string& s) { return fnv1a(std::vector<std::uint8_t>(s.begin(), s.end())); }

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_text;  // canonical configuration the command ran with
  std::uint64_t seed = 0;

  void write(const std::string& path) const {
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["config"] = config_text;
    j["config_hash"] = hex64(hash_text(config_text));
    j["seed"] = seed;
    j["git_describe"] = BITRL_GIT_DESCRIBE;
    j["timestamp"] = utc_timestamp();
    if (auto parent = std::filesystem::path(path).parent_path(); !parent.empty()) {
      std::filesystem::create_directories(parent);
    }
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorKind::io, "cannot write manifest '" + path + "'");
  }
};

// Canonical "--flag value" listing of the parsed options of a subcommand.
std::string canonical_options(const CLI::App* sub) {
  std::string out;
  for (const CLI::Option* opt : sub->get_options()) {
    if (opt->get_name() == "--help" || opt->get_name() == "--manifest") continue;
    out += opt->get_name() + " =";
    for (const auto& r : opt->results()) out += " " + r;
    out += "\n";
  }
  return out;
}

void write_jsonl_line(std::ofstream& f, const json& j) {
  f << j.dump() << '\n';
  f.flush();
}

// --- quantize ---------------------------------------------------------------

struct QuantizeArgs {
  std::string in, out, init;
  double tau_frac = 0.5;
  std::string scale = "absmean";
  std::uint64_t seed = 0;
};

int cmd_quantize(const QuantizeArgs& a) {
  if (!a.init.empty()) {
    RngStream rng(a.seed, 0);
    const BackbonePair pair = build_backbone(BackboneConfig{}, rng);
    save_checkpoint(backbone_checkpoint(pair.shadow), a.init);
    std::printf("wrote full-precision backbone (seed %llu) to %s\n", static_cast<unsigned long long>(a.seed),
                a.init.c_str());
    if (a.in.empty()) return kExitOk;
  }
  if (a.in.empty() || a.out.empty()) throw CLI::ValidationError("quantize", "--in and --out are required");
  QuantConfig q;
  q.threshold_fraction = a.tau_frac;
  q.scale_mode = parse_scale_mode(a.scale);
  q.validate();

  const Checkpoint src = load_checkpoint(a.in);
  const ShadowBackbone fp = load_shadow_backbone(src);
  const BackboneModel model = quantize_backbone(fp, q);
  Checkpoint dst = backbone_checkpoint(model);
  // Anything beyond the backbone (heads, agent metadata) is carried over.
  for (const auto& [k, v] : src.meta) {
    if (k.rfind("backbone.", 0) != 0 && k.rfind("quant.", 0) != 0) dst.meta[k] = v;
  }
  for (const auto& t : src.tensors) {
    if (t.name.rfind("backbone.", 0) != 0) dst.tensors.push_back(t);
  }

  std::printf("%-28s %12s %12s %12s\n", "tensor", "|W|", "|Q(W)-W|", "eps_Q");
  for (std::size_t l = 0; l < fp.layers().size(); ++l) {
    const auto& f = fp.layers()[l];
    const auto& m = model.layers()[l];
    const DenseMatrix* fw[6] = {&f.wq, &f.wk, &f.wv, &f.wo, &f.w1, &f.w2};
    const TernaryTensor* mw[6] = {&m.wq, &m.wk, &m.wv, &m.wo, &m.w1, &m.w2};
    for (std::size_t i = 0; i < 6; ++i) {
      const PerturbationReport p = perturbation_between(fw[i]->data(), dequantize(*mw[i]).data());
      std::printf("%-28s %12.6g %12.6g %12.6g\n", (layer_prefix(l) + kLinearNames[i]).c_str(), p.theta_norm,
                  p.delta_norm, p.epsilon_q);
    }
  }
  const PerturbationReport total = perturbation_between(linear_parameters(fp), linear_parameters(dequantized(model)));
  const std::size_t fp_bytes = checkpoint_size(backbone_checkpoint(fp));
  const std::size_t q_bytes = checkpoint_size(backbone_checkpoint(model));
  save_checkpoint(dst, a.out);
  std::printf("%-28s %12.6g %12.6g %12.6g\n", "all linear weights", total.theta_norm, total.delta_norm, total.epsilon_q);
  std::printf("backbone bytes: fp32 %zu, ternary %zu, ratio %.2fx\n", fp_bytes, q_bytes,
              static_cast<double>(fp_bytes) / static_cast<double>(q_bytes));
  return kExitOk;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string env, config, out, critic;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

TrainConfig resolve_train_config(const TrainArgs& a, std::vector<std::string>& defaulted) {
  TrainConfig cfg = a.config.empty() ? parse_train_config("", &defaulted) : load_train_config(a.config, &defaulted);
  if (a.seed_set) cfg.seed = a.seed;
  if (!a.critic.empty()) cfg.critic_mode = a.critic;
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& a, Manifest& manifest, const std::string& manifest_path) {
  const EnvId env = parse_env_id(a.env);
  std::vector<std::string> defaulted;
  const TrainConfig cfg = resolve_train_config(a, defaulted);
  for (const auto& k : defaulted) std::fprintf(stderr, "config: '%s' not set, using default\n", k.c_str());

  std::filesystem::create_directories(a.out);
  manifest.config_text = "env = " + std::string(env_name(env)) + "\n" + to_text(cfg);
  manifest.seed = cfg.seed;
  manifest.write(manifest_path.empty() ? a.out + "/manifest.json" : manifest_path);
  {
    std::ofstream c(a.out + "/config.txt", std::ios::trunc);
    c << to_text(cfg);
  }
  std::ofstream metrics(a.out + "/metrics.jsonl", std::ios::trunc);
  std::ofstream evals(a.out + "/evals.jsonl", std::ios::trunc);
  if (!metrics || !evals) throw Error(ErrorKind::io, "cannot create run files under '" + a.out + "'");

  TrainHooks hooks;
  hooks.on_update = [&](const UpdateMetrics& m) { write_jsonl_line(metrics, to_json(m)); };
  hooks.on_eval = [&](const EvalResult& e) {
    write_jsonl_line(evals, to_json(e));
    std::fprintf(stderr, "step %zu: eval mean return %.2f (std %.2f)\n", e.step, e.mean, e.std);
  };
  const TrainResult r = train(env, cfg, hooks);
  save_checkpoint(r.checkpoint, a.out + "/checkpoint.btrl");
  if (r.backbone_checksum_before != r.backbone_checksum_after) {
    std::fprintf(stderr, "error: backbone changed during training\n");
    return kExitAssert;
  }
  if (r.status == RunStatus::diverged) {
    std::fprintf(stderr, "error: training diverged at step %zu after %zu consecutive failed updates\n",
                 r.updates.empty() ? 0 : r.updates.back().step, kMaxFailedUpdates);
    return kExitRuntime;
  }
  std::printf("final eval mean return %.2f, best %.2f\n", r.final_eval(), r.best_eval());
  return kExitOk;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, env;
  std::size_t episodes = 20;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  const EnvId env = parse_env_id(a.env);
  RngStream rng(a.seed, kStreamEval);
  const EvalResult r = evaluate(load_checkpoint(a.ckpt), env, a.episodes, rng);
  std::printf("%s\n", to_json(r).dump().c_str());
  return kExitOk;
}

// --- bench ------------------------------------------------------------------

std::vector<std::pair<std::size_t, std::size_t>> parse_dims(const std::vector<std::string>& items) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  auto num = [](const std::string& s) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size() || v == 0) throw CLI::ValidationError("--dims", "bad dimension '" + s + "'");
    return static_cast<std::size_t>(v);
  };
  for (const auto& it : items) {
    const auto x = it.find('x');
    if (x == std::string::npos) {
      const std::size_t n = num(it);
      out.emplace_back(n, n);
    } else {
      out.emplace_back(num(it.substr(0, x)), num(it.substr(x + 1)));
    }
  }
  return out;
}

int cmd_bench(const std::vector<std::string>& dims_arg, std::size_t iters) {
  const auto dims = parse_dims(dims_arg);
  for (const auto& r : bench_matvec(dims, iters)) {
    json j;
    j["rows"] = r.rows;
    j["cols"] = r.cols;
    j["median_ns"] = r.median_ns;
    j["p95_ns"] = r.p95_ns;
    j["speedup"] = r.speedup_vs_dense;
    j["dense_median_ns"] = r.dense_median_ns;
    j["dense_p95_ns"] = r.dense_p95_ns;
    j["bytes"] = r.bytes_touched;
    j["dense_bytes"] = r.dense_bytes_touched;
    std::printf("%s\n", j.dump().c_str());
  }
  return kExitOk;
}

// --- verify -----------------------------------------------------------------

int cmd_verify(const std::string& suite, const std::string& out_path) {
  std::vector<SuiteReport> reports;
  if (suite == "lemma1" || suite == "all") reports.push_back(run_lemma1_suite());
  if (suite == "thm1" || suite == "all") reports.push_back(run_thm1_suite());
  if (suite == "thm2" || suite == "all") reports.push_back(run_thm2_suite());
  if (suite == "entropy" || suite == "all") reports.push_back(run_entropy_suite());
  json doc = json::array();
  bool ok = true;
  for (const auto& r : reports) {
    json j;
    j["suite"] = r.name;
    j["passed"] = r.passed;
    j["detail"] = r.detail;
    doc.push_back(j);
    ok = ok && r.passed;
    std::printf("%-8s %s\n", r.name.c_str(), r.passed ? "PASS" : "FAIL");
    if (r.name == "entropy" && r.detail.value("negative_flagged", false)) {
      std::printf("note: mean entropy shift is negative on this random backbone (flagged, not failed)\n");
    }
  }
  if (!out_path.empty()) {
    std::ofstream f(out_path, std::ios::trunc);
    f << doc.dump(2) << '\n';
    if (!f) throw Error(ErrorKind::io, "cannot write '" + out_path + "'");
  } else {
    std::printf("%s\n", doc.dump(2).c_str());
  }
  return ok ? kExitOk : kExitAssert;
}

// --- report -----------------------------------------------------------------

int cmd_report(const std::vector<std::string>& runs, const std::string& json_path) {
  std::vector<RunSummary> summaries;
  for (const auto& d : runs) summaries.push_back(load_run_summary(d));
  const auto rows = aggregate(summaries);
  std::printf("%zu run(s)\n%s", summaries.size(), format_table(rows).c_str());
  if (!json_path.empty()) {
    std::ofstream f(json_path, std::ios::trunc);
    f << to_json(rows).dump(2) << '\n';
    if (!f) throw Error(ErrorKind::io, "cannot write '" + json_path + "'");
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ternary frozen-encoder reinforcement learning toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string manifest_path;
  auto add_manifest = [&](CLI::App* sub, const char* what) {
    sub->add_option("--manifest", manifest_path, what);
  };

  QuantizeArgs qa;
  auto* quant = app.add_subcommand("quantize", "Quantize a full-precision backbone checkpoint to ternary");
  quant->add_option("--in", qa.in, "Input BTRL checkpoint");
  quant->add_option("--out", qa.out, "Output ternary checkpoint");
  quant->add_option("--tau-frac", qa.tau_frac, "Threshold as a fraction of mean |W|")->capture_default_str();
  quant->add_option("--scale", qa.scale, "Scale mode")->check(CLI::IsMember({"absmean", "none"}))->capture_default_str();
  quant->add_option("--init", qa.init, "Write a freshly drawn full-precision backbone to this path");
  quant->add_option("--seed", qa.seed, "Seed for --init")->capture_default_str();
  add_manifest(quant, "Manifest path (default <out>.manifest.json)");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train policy and value heads on a frozen ternary backbone");
  train_cmd->add_option("--env", ta.env, "Environment")
      ->required()
      ->check(CLI::IsMember({"cartpole", "mountaincar", "acrobot", "textgrid"}));
  train_cmd->add_option("--config", ta.config, "key = value config file; missing keys use defaults");
  auto* seed_opt = train_cmd->add_option("--seed", ta.seed, "Training seed (overrides the config)");
  train_cmd->add_option("--out", ta.out, "Output run directory")->required();
  train_cmd->add_option("--critic", ta.critic, "Critic mode (overrides the config)")
      ->check(CLI::IsMember({"ternary", "fp32", "ensemble3", "ensemble5"}));
  add_manifest(train_cmd, "Manifest path (default <out>/manifest.json)");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a trained checkpoint with the greedy policy");
  eval_cmd->add_option("--ckpt", ea.ckpt, "Agent checkpoint")->required();
  eval_cmd->add_option("--env", ea.env, "Environment")
      ->required()
      ->check(CLI::IsMember({"cartpole", "mountaincar", "acrobot", "textgrid"}));
  eval_cmd->add_option("--episodes", ea.episodes, "Episodes")->capture_default_str();
  eval_cmd->add_option("--seed", ea.seed, "Seed")->capture_default_str();
  add_manifest(eval_cmd, "Manifest path (default eval.manifest.json)");

  std::vector<std::string> dims{"1024"};
  std::size_t iters = 1000;
  auto* bench = app.add_subcommand("bench", "Ternary vs dense FP32 matvec latency");
  bench->add_option("--dims", dims, "Shapes: N or RxC, comma separated")->delimiter(',')->capture_default_str();
  bench->add_option("--iters", iters, "Timed iterations per shape")->capture_default_str();
  add_manifest(bench, "Manifest path (default bench.manifest.json)");

  std::string suite, verify_out;
  auto* verify = app.add_subcommand("verify", "Run a theory verification suite");
  verify->add_option("--suite", suite, "Suite")->required()->check(
      CLI::IsMember({"lemma1", "thm1", "thm2", "entropy", "all"}));
  verify->add_option("--out", verify_out, "Write the JSON report here instead of stdout");
  add_manifest(verify, "Manifest path (default verify.manifest.json)");

  std::vector<std::string> runs;
  std::string report_json;
  auto* report = app.add_subcommand("report", "Aggregate training runs into mean +- std tables");
  report->add_option("--runs", runs, "Run directories")->required()->expected(1, -1);
  report->add_option("--json", report_json, "Also write the table as JSON");
  add_manifest(report, "Manifest path (default report.manifest.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  Manifest manifest;
  manifest.command = sub->get_name();
  manifest.argv.assign(argv, argv + argc);
  manifest.config_text = canonical_options(sub);
  try {
    if (sub == quant) {
      manifest.seed = qa.seed;
      const std::string base = qa.out.empty() ? qa.init : qa.out;
      manifest.write(manifest_path.empty() ? base + ".manifest.json" : manifest_path);
      return cmd_quantize(qa);
    }
    if (sub == train_cmd) {
      ta.seed_set = seed_opt->count() > 0;
      return cmd_train(ta, manifest, manifest_path);
    }
    if (sub == eval_cmd) {
      manifest.seed = ea.seed;
      manifest.write(manifest_path.empty() ? "eval.manifest.json" : manifest_path);
      return cmd_eval(ea);
    }
    if (sub == bench) {
      manifest.write(manifest_path.empty() ? "bench.manifest.json" : manifest_path);
      return cmd_bench(dims, iters);
    }
    if (sub == verify) {
      manifest.write(manifest_path.empty() ? "verify.manifest.json" : manifest_path);
      return cmd_verify(suite, verify_out);
    }
    if (sub == report) {
      manifest.write(manifest_path.empty() ? "report.manifest.json" : manifest_path);
      return cmd_report(runs, report_json);
    }
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.kind() == ErrorKind::invalid_argument ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
