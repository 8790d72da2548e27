// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

#include "cpsim/error.h"
#include "cpsim/report.h"

namespace cpsim {

namespace {

struct Recorder {
  VerifySummary& summary;
  std::string key;

  void check(const std::string& name, bool ok, const std::string& detail = {}) {
    ++summary.checks;
    ++summary.check_counts[name];
    if (ok) {
      ++summary.passed;
    } else {
      summary.failures.push_back(VerifyFailure{key, name, detail});
    }
  }
};

std::string num(double x) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << x;
  return s.str();
}

std::vector<std::uint64_t> phase_totals(const Mesh& mesh, std::size_t device) {
  const auto& m = mesh.memory().device(device);
  return {m.phase_peak_total.begin(), m.phase_peak_total.end()};
}

bool matches_row(const Mesh& mesh, const PhaseMemoryReport& row, const ModelConfig& model) {
  for (std::size_t d = 0; d < mesh.device_count(); ++d) {
    const auto got = phase_totals(mesh, d);
    for (std::size_t p = 0; p < 4; ++p) {
      const double want = row.bytes(p, model.d_model(), mesh.bytes_per_element());
      if (static_cast<double>(got[p]) != want) return false;
    }
  }
  return true;
}

AttentionGrads gathered(const ShardedGrads& g) { return {g.dq.gather(), g.dk.gather(), g.dv.gather()}; }

void analytical_invariants(Recorder& rec, const GridPoint& p) {
  const std::size_t r = p.q_heads / p.kv_heads;
  const std::size_t nu = p.q_heads / p.heads_per_stage;
  const MemoryParams mp{p.seq_len, p.devices, 1, r, nu, 1};
  if (nu > 1) {
    const auto up = attn_fwd_peak(MemoryMethod::upipe, mp);
    const auto off = attn_fwd_peak(MemoryMethod::ulysses_offload, mp);
    bool dominated = true;
    for (std::size_t i = 0; i < 4; ++i) dominated = dominated && up.phases[i] <= off.phases[i];
    rec.check("upipe_dominates_offload", dominated);
  }
  const auto s = upipe_savings(p.q_heads, p.devices, p.heads_per_stage, p.seq_len, p.head_dim, 2);
  rec.check("savings_ratio", s.reduction_ratio == 1.0 - static_cast<double>(p.heads_per_stage) / p.q_heads &&
                                 s.upipe_bytes * p.q_heads == s.ulysses_bytes * p.heads_per_stage);
}

}  // namespace

std::string GridPoint::key() const {
  std::ostringstream s;
  s << "S=" << seq_len << " C=" << devices << " H_q=" << q_heads << " H_kv=" << kv_heads << " d_head=" << head_dim
    << " U=" << heads_per_stage << " causal=" << (causal ? "true" : "false");
  return s.str();
}

std::vector<GridPoint> verification_grid(std::string_view name) {
  std::vector<std::size_t> seqs, devices{1, 2, 4};
  std::vector<std::pair<std::size_t, std::size_t>> heads;
  std::size_t head_dim = 0;
  bool all_u = false;
  if (name == "small") {
    seqs = {8};
    heads = {{4, 1}, {4, 2}, {4, 4}, {8, 2}};
    head_dim = 2;
  } else if (name == "full") {
    seqs = {8, 16, 32};
    heads = {{4, 1}, {4, 2}, {4, 4}, {8, 1}, {8, 2}, {8, 4}};
    head_dim = 4;
    all_u = true;
  } else {
    throw ConfigError("unknown grid \"" + std::string(name) + "\"; expected small or full");
  }
  std::vector<GridPoint> grid;
  for (auto s : seqs) {
    for (auto c : devices) {
      for (auto [hq, hkv] : heads) {
        std::set<std::size_t> us{c, hq};
        if (all_u) us.insert(2 * c);
        for (auto u : us) {
          if (u % c != 0 || hq % u != 0) continue;
          for (bool causal : {true, false}) grid.push_back(GridPoint{s, hq, hkv, head_dim, c, u, causal});
        }
      }
    }
  }
  return grid;
}

AttentionPartial faulty_merge(const AttentionPartial& a, const AttentionPartial& b) {
  AttentionPartial r = a;
  const std::size_t d = a.out.dim(2);
  for (std::size_t i = 0; i < a.lse.dim(0); ++i) {
    for (std::size_t h = 0; h < a.lse.dim(1); ++h) {
      if (b.lse.at(i, h) <= a.lse.at(i, h)) continue;
      r.lse.at(i, h) = b.lse.at(i, h);
      for (std::size_t e = 0; e < d; ++e) r.out.at(i, h, e) = b.out.at(i, h, e);
    }
  }
  return r;
}

VerifySummary verify_suite(std::string_view grid_name, const VerifyOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  VerifySummary summary;
  summary.grid = std::string(grid_name);
  const auto grid = verification_grid(grid_name);
  const bool with_backward = grid_name == "small";
  EngineOptions engine;
  if (options.inject_merge_fault) engine.merge = faulty_merge;

  for (std::size_t idx = 0; idx < grid.size(); ++idx) {
    const auto& p = grid[idx];
    Recorder rec{summary, p.key()};
    ++summary.configs;
    const ModelConfig model{p.seq_len, p.q_heads, p.kv_heads, p.head_dim, 0, 0, 1};
    const auto data = generate_data(model, options.seed + idx);
    const auto gqa = model.gqa();
    const auto oracle = reference_attention_forward(data.q, data.k, data.v, gqa, p.causal);
    const MeshConfig flat{p.devices, p.devices, 1, 2};
    const auto sharded = [&](const Mesh& m) {
      return QkvSource::preformed(shard_sequence(data.q, m), shard_sequence(data.k, m), shard_sequence(data.v, m));
    };
    const auto forward_check = [&](const std::string& name, const Tensor& out) {
      const double diff = max_abs_diff(out, oracle.out);
      rec.check(name, diff <= kForwardTolerance, "max_abs_diff=" + num(diff));
    };

    Mesh ul_mesh(flat);
    auto ul = run_ulysses_forward(ul_mesh, model, sharded(ul_mesh), p.causal);
    forward_check("forward_ulysses", ul.out.gather());

    Mesh ring_mesh(MeshConfig{p.devices, 1, p.devices, 2});
    forward_check("forward_ring", run_ring_forward(ring_mesh, model, sharded(ring_mesh), p.causal, engine).gather());

    const std::size_t a = p.devices >= 2 ? 2 : 1;
    Mesh hy_mesh(MeshConfig{p.devices, a, p.devices / a, 2});
    forward_check("forward_hybrid", run_hybrid_forward(hy_mesh, model, sharded(hy_mesh), p.causal, engine).gather());

    const UPipeConfig up{p.heads_per_stage};
    Mesh up_mesh(flat);
    auto upf = run_upipe_forward(up_mesh, model, up, sharded(up_mesh), p.causal);
    forward_check("forward_upipe", upf.out.gather());

    rec.check("schedule_invariants", schedule_violations(upf.schedule).empty());
    const std::uint64_t want = gqa_comm_volume(p.q_heads, p.kv_heads, p.devices, upf.schedule.grouped);
    bool comm_ok = true;
    for (std::size_t d = 0; d < p.devices; ++d) comm_ok = comm_ok && measured_head_transfers(up_mesh, model, d) == want;
    rec.check("comm_formula", comm_ok, "expected " + std::to_string(want));

    const std::size_t nu = up.stages(p.q_heads);
    if (nu > 1) {
      std::size_t bad = 0;
      for (std::size_t d = 0; d < p.devices; ++d) bad += upipe_flatness_violations(up_mesh.memory(), d, upf.schedule);
      rec.check("buffer_reuse_flatness", bad == 0, std::to_string(bad) + " events above the first-stage peak");
    }

    if (p.devices > 1) {
      if (p.kv_heads % p.devices == 0) {
        const auto row = attn_fwd_peak(MemoryMethod::ulysses, {p.seq_len, p.devices, 1, model.gqa_ratio(), {}, {}});
        rec.check("measured_ulysses_row", matches_row(ul_mesh, row, model));
      }
      const auto row = attn_fwd_peak(MemoryMethod::upipe, {p.seq_len, p.devices, 1, 1, nu, {}});
      rec.check("measured_upipe_row", matches_row(up_mesh, row, model));
    }

    if (model.gqa_ratio() == 1) {
      bool ratio_ok = true;
      for (std::size_t d = 0; d < p.devices; ++d) {
        const auto ui = ul_mesh.memory().device(d).peak_intermediate;
        const auto pi = up_mesh.memory().device(d).peak_intermediate;
        ratio_ok = ratio_ok && pi * p.q_heads == ui * p.heads_per_stage;
      }
      rec.check("intermediate_ratio", ratio_ok);
    }

    if (with_backward) {
      analytical_invariants(rec, p);
      const auto ref = reference_attention_backward(data.q, data.k, data.v, oracle.out, oracle.lse, data.cotangent,
                                                    gqa, p.causal);
      const auto fd = finite_difference_gradients(data.q, data.k, data.v, data.cotangent, gqa, p.causal, kFiniteDifferenceStep);
      const auto backward_checks = [&](const std::string& name, const AttentionGrads& g) {
        const double diff = gradient_max_abs_diff(g, ref);
        rec.check(name + "_oracle", diff <= kBackwardTolerance, "max_abs_diff=" + num(diff));
        const double rel = gradient_relative_error(g, fd);
        rec.check(name + "_finite_difference", rel <= kFiniteDifferenceTolerance, "relative_error=" + num(rel));
      };
      Mesh bm(flat);
      const auto cot = shard_sequence(data.cotangent, bm);
      backward_checks("backward_ulysses", gathered(run_ulysses_backward(bm, model, ul.state, cot)));
      Mesh bm2(flat);
      backward_checks("backward_upipe", gathered(run_upipe_backward(bm2, model, up, upf.state, cot)));
    }
  }
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

// Within each super-stage, intermediate bytes during the input exchange and
// kernel of later stages stay at or below the first stage's peak. A schedule
// without grouping is one super-stage spanning every stage.
std::size_t upipe_flatness_violations(const MemoryLedger& ledger, std::size_t device, const HeadSchedule& schedule) {
  const auto& events = ledger.device(device).events;
  const std::size_t len = schedule.grouped ? schedule.super_stage_length : schedule.stage_count();
  std::size_t bad = 0;
  for (std::size_t first = 0; first < schedule.stage_count(); first += len) {
    std::uint64_t first_peak = 0;
    for (const auto& e : events) {
      if (e.phase == Phase::out_a2a || e.stage != static_cast<int>(first)) continue;
      first_peak = std::max(first_peak, e.live_intermediate);
    }
    for (const auto& e : events) {
      if (e.phase == Phase::out_a2a || e.stage <= static_cast<int>(first) ||
          e.stage >= static_cast<int>(first + len)) {
        continue;
      }
      if (e.live_intermediate > first_peak) ++bad;
    }
  }
  return bad;
}

}  // namespace cpsim
