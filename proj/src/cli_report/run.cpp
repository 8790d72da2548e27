// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "cpsim/error.h"
#include "cpsim/report.h"

namespace cpsim {

namespace {

std::vector<DeviceMemorySummary> memory_summary(const Mesh& mesh) {
  std::vector<DeviceMemorySummary> out;
  for (std::size_t d = 0; d < mesh.device_count(); ++d) {
    const auto& m = mesh.memory().device(d);
    DeviceMemorySummary s{d, m.peak_total, m.peak_intermediate, {}};
    for (Phase p : kAllPhases) {
      const auto i = static_cast<std::size_t>(p);
      s.phases.push_back(PhasePeak{p, m.phase_peak_total[i], m.phase_peak_intermediate[i]});
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<DeviceCommSummary> comm_summary(const Mesh& mesh) {
  std::vector<DeviceCommSummary> out;
  for (std::size_t d = 0; d < mesh.device_count(); ++d) {
    const auto& c = mesh.comm().device(d);
    out.push_back(DeviceCommSummary{d, c.bytes_sent, c.bytes_received, c.entries});
  }
  return out;
}

// Analytical bytes must be integral and equal the measured phase peak on
// every device.
bool measured_matches(const std::vector<DeviceMemorySummary>& memory, const std::vector<double>& bytes) {
  for (const auto& dev : memory) {
    for (std::size_t p = 0; p < 4; ++p) {
      const double want = std::round(bytes[p]);
      if (std::abs(want - bytes[p]) > 1e-6) return false;
      if (static_cast<double>(dev.phases[p].peak_total) != want) return false;
    }
  }
  return true;
}

AnalyticalSummary analytical_for(const ExperimentConfig& c, MemoryMethod method, std::size_t ratio,
                                 std::optional<std::size_t> nu, bool comparable,
                                 const std::vector<DeviceMemorySummary>& memory) {
  AnalyticalSummary a;
  a.method = method;
  a.params = MemoryParams{c.model.seq_len, c.mesh.devices, 1, ratio, nu, std::nullopt};
  const auto r = attn_fwd_peak(method, a.params);
  for (double u : r.phases) {
    a.forward_units.push_back(u);
    a.forward_bytes.push_back(u * static_cast<double>(c.model.d_model() * c.mesh.bytes_per_element));
  }
  if (comparable) a.measured_match = measured_matches(memory, a.forward_bytes);
  return a;
}

AttentionGrads gathered(const ShardedGrads& g) { return {g.dq.gather(), g.dk.gather(), g.dv.gather()}; }

}  // namespace

RunReport run_experiment(const ExperimentConfig& config) {
  validate_experiment(config);
  const auto& model = config.model;
  const auto data = generate_data(model, config.seed);
  const GqaMap gqa = model.gqa();
  const auto oracle = reference_attention_forward(data.q, data.k, data.v, gqa, config.causal);

  RunReport report;
  report.config = config;
  Mesh mesh(config.mesh);
  const QkvSource qkv = QkvSource::preformed(shard_sequence(data.q, mesh), shard_sequence(data.k, mesh),
                                             shard_sequence(data.v, mesh));
  std::optional<AttentionGrads> grads;
  Tensor out = oracle.out;
  const bool multi = config.mesh.devices > 1;

  switch (config.method) {
    case Method::oracle:
      if (config.backward) {
        grads = reference_attention_backward(data.q, data.k, data.v, oracle.out, oracle.lse, data.cotangent, gqa,
                                             config.causal);
      }
      break;
    case Method::ulysses: {
      auto fwd = run_ulysses_forward(mesh, model, qkv, config.causal);
      out = fwd.out.gather();
      report.memory = memory_summary(mesh);
      if (config.backward) {
        Mesh bwd_mesh(config.mesh);
        grads = gathered(run_ulysses_backward(bwd_mesh, model, fwd.state, shard_sequence(data.cotangent, mesh)));
      }
      report.analytical = analytical_for(config, MemoryMethod::ulysses, model.gqa_ratio(), std::nullopt,
                                         multi && model.kv_heads % config.mesh.devices == 0, report.memory);
      break;
    }
    case Method::ring:
      out = run_ring_forward(mesh, model, qkv, config.causal).gather();
      break;
    case Method::hybrid:
      out = run_hybrid_forward(mesh, model, qkv, config.causal).gather();
      break;
    case Method::upipe: {
      const UPipeConfig up{config.upipe_heads_per_stage};
      auto fwd = run_upipe_forward(mesh, model, up, qkv, config.causal);
      out = fwd.out.gather();
      report.memory = memory_summary(mesh);
      if (config.backward) {
        Mesh bwd_mesh(config.mesh);
        grads = gathered(run_upipe_backward(bwd_mesh, model, up, fwd.state, shard_sequence(data.cotangent, mesh)));
      }
      // Every stage carries U key/value heads, so the stage buffers follow
      // the R = 1 evaluation of the staged row.
      report.analytical = analytical_for(config, MemoryMethod::upipe, 1, up.stages(model.q_heads), multi,
                                         report.memory);
      ScheduleSummary s;
      s.schedule = fwd.schedule;
      const std::size_t c = config.mesh.devices;
      s.naive_volume = gqa_comm_volume(model.q_heads, model.kv_heads, c, false);
      if (model.kv_heads % c == 0) s.scheduled_volume = gqa_comm_volume(model.q_heads, model.kv_heads, c, true);
      for (std::size_t d = 0; d < c; ++d) s.measured_head_transfers.push_back(measured_head_transfers(mesh, model, d));
      report.schedule = std::move(s);
      break;
    }
  }
  if (report.memory.empty()) report.memory = memory_summary(mesh);
  report.comm = comm_summary(mesh);

  report.max_abs_diff = max_abs_diff(out, oracle.out);
  report.forward_pass = report.max_abs_diff <= kForwardTolerance;
  if (grads) {
    const auto ref = reference_attention_backward(data.q, data.k, data.v, oracle.out, oracle.lse, data.cotangent,
                                                  gqa, config.causal);
    report.grad_max_abs_diff = gradient_max_abs_diff(*grads, ref);
    report.backward_pass = *report.grad_max_abs_diff <= kBackwardTolerance;
  }
  report.passed = report.forward_pass && report.backward_pass.value_or(true) &&
                  (!report.analytical || report.analytical->measured_match.value_or(true));
  return report;
}

}  // namespace cpsim
