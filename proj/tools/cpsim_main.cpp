// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0
//
// cpsim: run, mem, schedule and verify subcommands.
// Exit codes: 0 success, 1 verification failure, 2 config error, 3 I/O error.
// Seed precedence: --seed flag, then CPSIM_SEED, then the config file.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cpsim/error.h"
#include "cpsim/report.h"

namespace {

using json = nlohmann::ordered_json;

constexpr int kExitOk = 0;
constexpr int kExitFail = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

struct RunFlags {
  std::string config_path;
  std::optional<std::string> method;
  std::optional<std::size_t> seq_len, q_heads, kv_heads, head_dim, ffn_dim, vocab_size, layers;
  std::optional<std::size_t> devices, ulysses_degree, ring_degree, bytes_per_element, upipe_heads;
  std::optional<std::uint64_t> seed;
  std::optional<bool> causal, backward;
  std::optional<std::string> output;
  std::string format = "json";
};

std::uint64_t parse_seed_env(const char* text) {
  try {
    std::size_t used = 0;
    const std::string s(text);
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw cpsim::ConfigError(std::string("CPSIM_SEED must be a non-negative integer, got \"") + text + "\"");
  }
}

cpsim::ExperimentConfig build_config(const RunFlags& f) {
  json j;
  if (!f.config_path.empty()) {
    j = cpsim::config_to_json(cpsim::parse_config_file(f.config_path));
  } else {
    j = {{"model", {{"seq_len", 16}, {"q_heads", 4}, {"kv_heads", 2}, {"head_dim", 4}}},
         {"mesh", {{"devices", 2}}}};
  }
  auto set = [](json& node, const char* key, const auto& v) {
    if (v) node[key] = *v;
  };
  set(j["model"], "seq_len", f.seq_len);
  set(j["model"], "q_heads", f.q_heads);
  set(j["model"], "kv_heads", f.kv_heads);
  set(j["model"], "head_dim", f.head_dim);
  set(j["model"], "ffn_dim", f.ffn_dim);
  set(j["model"], "vocab_size", f.vocab_size);
  set(j["model"], "layers", f.layers);
  if (f.devices && !f.ulysses_degree && !f.ring_degree) {
    j["mesh"].erase("ulysses_degree");
    j["mesh"].erase("ring_degree");
  }
  set(j["mesh"], "devices", f.devices);
  set(j["mesh"], "ulysses_degree", f.ulysses_degree);
  set(j["mesh"], "ring_degree", f.ring_degree);
  if (f.ulysses_degree && !f.ring_degree) j["mesh"].erase("ring_degree");
  if (f.ring_degree && !f.ulysses_degree) j["mesh"].erase("ulysses_degree");
  set(j["mesh"], "bytes_per_element", f.bytes_per_element);
  set(j, "method", f.method);
  set(j, "upipe_heads_per_stage", f.upipe_heads);
  if (const char* env = std::getenv("CPSIM_SEED"); env && *env) j["seed"] = parse_seed_env(env);
  set(j, "seed", f.seed);
  set(j, "causal", f.causal);
  set(j, "backward", f.backward);
  set(j, "output", f.output);
  return cpsim::parse_config(j);
}

int cmd_run(const RunFlags& f) {
  const auto config = build_config(f);
  const auto report = cpsim::run_experiment(config);
  const std::string text = f.format == "csv" ? cpsim::report_to_csv(report) : cpsim::report_to_json_text(report);
  if (config.output.empty()) {
    std::cout << text;
  } else {
    cpsim::write_text_file(config.output, text);
    std::cerr << "wrote " << config.output << '\n';
  }
  return report.passed ? kExitOk : kExitFail;
}

struct MemFlags {
  std::size_t seq_len = 1024, devices = 4, layers = 1, ratio = 1, nu = 4, pi = 4;
  std::size_t d_model = 0, ffn_dim = 0, vocab_size = 0, head_dim = 1, bytes_per_element = 2;
};

int cmd_mem(const MemFlags& f) {
  using namespace cpsim;
  json out;
  const MemoryParams params{f.seq_len, f.devices, f.layers, f.ratio, f.nu, f.pi};
  for (auto dir : {Direction::forward, Direction::backward}) {
    json rows = json::array();
    for (auto m : {MemoryMethod::ulysses, MemoryMethod::ulysses_offload, MemoryMethod::fpdt, MemoryMethod::upipe}) {
      const auto r = dir == Direction::forward ? attn_fwd_peak(m, params) : attn_bwd_peak(m, params);
      json phases;
      const auto labels = PhaseMemoryReport::phase_labels(dir);
      for (std::size_t i = 0; i < 4; ++i) phases[std::string(labels[i])] = r.phases[i];
      rows.push_back({{"method", method_name(m)}, {"phases", phases}, {"peak", r.peak()}});
    }
    out[std::string(direction_name(dir))] = rows;
  }
  const auto g = gqa_factors(f.ratio);
  out["factors"] = {{"R", g.R}, {"gamma", g.gamma}, {"beta", g.beta}};
  if (f.d_model && f.ffn_dim && f.vocab_size) {
    if (f.d_model % f.head_dim != 0) throw ConfigError("constraint \"d_model divisible by d_head\" violated");
    const ModelConfig model{f.seq_len, f.d_model / f.head_dim, f.d_model / f.head_dim, f.head_dim, f.ffn_dim,
                            f.vocab_size, f.layers};
    const auto t = table1_breakdown(model, f.bytes_per_element);
    auto stage = [](const StageMemory& s) {
      return json{{"inputs", s.inputs}, {"intermediate", s.intermediate}, {"outputs", s.outputs}, {"total", s.total}};
    };
    out["stages"] = {{"embedding", stage(t.embedding)},
                     {"attention", stage(t.attention)},
                     {"ffn", stage(t.ffn)},
                     {"cross_entropy", stage(t.cross_entropy)},
                     {"token_id_bytes", t.token_id_bytes},
                     {"lse_bytes", t.lse_bytes}};
  }
  std::cout << out.dump(2) << '\n';
  return kExitOk;
}

int cmd_schedule(std::size_t hq, std::size_t hkv, std::size_t c, bool as_json) {
  if (as_json) {
    std::cout << cpsim::schedule_dump_json(hq, hkv, c).dump(2) << '\n';
  } else {
    std::cout << cpsim::schedule_dump_text(hq, hkv, c);
  }
  return kExitOk;
}

int cmd_verify(const std::string& grid, std::uint64_t seed, bool fault) {
  const auto s = cpsim::verify_suite(grid, {seed, fault});
  for (const auto& f : s.failures) std::cout << "FAIL [" << f.config << "] " << f.check << " " << f.detail << '\n';
  std::cout << "grid " << s.grid << ": " << s.configs << " configs, " << s.passed << "/" << s.checks
            << " checks passed in " << s.seconds << " s\n";
  return s.ok() ? kExitOk : kExitFail;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulated context-parallel attention on a device mesh"};
  app.require_subcommand(1);

  RunFlags rf;
  auto* run = app.add_subcommand("run", "Run one experiment and emit its report");
  run->add_option("-c,--config", rf.config_path, "JSON config file");
  run->add_option("--method", rf.method, "oracle, ulysses, ring, upipe or hybrid");
  run->add_option("--seq-len", rf.seq_len);
  run->add_option("--q-heads", rf.q_heads);
  run->add_option("--kv-heads", rf.kv_heads);
  run->add_option("--head-dim", rf.head_dim);
  run->add_option("--ffn-dim", rf.ffn_dim);
  run->add_option("--vocab-size", rf.vocab_size);
  run->add_option("--layers", rf.layers);
  run->add_option("--devices", rf.devices);
  run->add_option("--ulysses-degree", rf.ulysses_degree);
  run->add_option("--ring-degree", rf.ring_degree);
  run->add_option("--bytes-per-element", rf.bytes_per_element);
  run->add_option("--upipe-heads", rf.upipe_heads, "U, heads per stage");
  run->add_option("--seed", rf.seed);
  run->add_option("--causal", rf.causal, "true or false");
  run->add_option("--backward", rf.backward, "true or false");
  run->add_option("-o,--output", rf.output, "report path; stdout when empty");
  run->add_option("--format", rf.format, "json or csv")->check(CLI::IsMember({"json", "csv"}));

  MemFlags mf;
  auto* mem = app.add_subcommand("mem", "Analytical memory tables");
  mem->add_option("--seq-len", mf.seq_len);
  mem->add_option("--devices", mf.devices);
  mem->add_option("--layers", mf.layers);
  mem->add_option("--ratio", mf.ratio, "R = H_q / H_kv");
  mem->add_option("--nu", mf.nu, "UPipe stages");
  mem->add_option("--pi", mf.pi, "FPDT chunks");
  mem->add_option("--d-model", mf.d_model);
  mem->add_option("--head-dim", mf.head_dim);
  mem->add_option("--ffn-dim", mf.ffn_dim);
  mem->add_option("--vocab-size", mf.vocab_size);
  mem->add_option("--bytes-per-element", mf.bytes_per_element);

  std::size_t sq = 16, skv = 4, sc = 4;
  bool sched_json = false;
  auto* sched = app.add_subcommand("schedule", "Dump the grouped-query head schedule for U = C");
  sched->add_option("--q-heads", sq);
  sched->add_option("--kv-heads", skv);
  sched->add_option("--devices", sc);
  sched->add_flag("--json", sched_json);

  std::string grid = "small";
  std::uint64_t vseed = 5;
  bool fault = false;
  auto* verify = app.add_subcommand("verify", "Run a verification grid");
  verify->add_option("--grid", grid)->check(CLI::IsMember({"small", "full"}));
  verify->add_option("--seed", vseed);
  verify->add_flag("--inject-merge-fault", fault, "use a corrupted log-sum-exp merge");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(rf);
    if (*mem) return cmd_mem(mf);
    if (*sched) return cmd_schedule(sq, skv, sc, sched_json);
    if (*verify) return cmd_verify(grid, vseed, fault);
  } catch (const cpsim::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFail;
  }
  return kExitOk;
}
