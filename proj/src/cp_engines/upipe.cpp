// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0
//
// Staged Ulysses. Per device the forward holds the input shard, one full
// "out_buf" and the reusable stage slots; the kernel writes each stage's
// head-layout output into out_buf. The output all-to-all runs after the last
// stage, one stage chunk at a time, once the input shard is released.

#include <optional>
#include <string>

#include "cpsim/engines.h"
#include "cpsim/error.h"

namespace cpsim {

namespace {

ShardedActivation seq_activation(std::vector<Tensor> shards, Shape global) {
  ShardedActivation x;
  x.axis = ShardAxis::sequence;
  x.shards = std::move(shards);
  x.global_shape = std::move(global);
  return x;
}

ShardedActivation head_activation(std::vector<Tensor> shards, Shape global, const DeviceGroup& all) {
  ShardedActivation x;
  x.axis = ShardAxis::head;
  x.shards = std::move(shards);
  x.global_shape = std::move(global);
  x.groups = {all};
  return x;
}

// A per-device slot reused across stages.
class StageSlot {
 public:
  StageSlot(Mesh& mesh, std::string label) : mesh_(mesh), label_(std::move(label)) {}

  void bind(std::size_t device, std::uint64_t bytes, Phase phase, int stage) {
    if (handles_.size() <= device) handles_.resize(device + 1);
    if (handles_[device]) {
      mesh_.memory().rebind(*handles_[device], bytes, phase, stage);
    } else {
      handles_[device] =
          mesh_.alloc_tracked(device, label_, BufferCategory::attention_intermediate, bytes, phase, stage);
    }
  }

  void release(Phase phase, int stage) {
    for (auto& h : handles_) {
      if (h && mesh_.memory().is_live(*h)) mesh_.free_tracked(*h, phase, stage);
    }
  }

 private:
  Mesh& mesh_;
  std::string label_;
  std::vector<std::optional<BufferHandle>> handles_;
};

}  // namespace

UPipeForward run_upipe_forward(Mesh& mesh, const ModelConfig& model, const UPipeConfig& upipe,
                               const QkvSource& qkv, bool causal) {
  const std::size_t c = mesh.device_count();
  model.validate(c);
  upipe.validate(model, c);
  if (qkv.empty() || qkv.device_count() != c) throw ShapeError("q/k/v source does not span the mesh");

  const HeadSchedule schedule = upipe_schedule(model.q_heads, model.kv_heads, c, upipe.heads_per_stage);
  const std::size_t rows = model.seq_len / c;
  const std::size_t u = upipe.heads_per_stage;
  const std::uint64_t unit = mesh.bytes_of(rows * model.d_model());
  const std::uint64_t chunk = mesh.bytes_of(rows * u * model.head_dim);
  const DeviceGroup all = mesh.all_devices();
  const std::vector<DeviceGroup> groups{all};
  const GqaMap local(u / c, u / c);
  const Shape stage_shape{model.seq_len, u, model.head_dim};

  std::vector<BufferHandle> input(c), out_buf(c);
  for (std::size_t d = 0; d < c; ++d) {
    input[d] = mesh.alloc_tracked(d, "input_shard", BufferCategory::input, unit, Phase::pre_attn);
  }

  StageSlot q_slot(mesh, "q_stage"), k_slot(mesh, "k_stage"), v_slot(mesh, "v_stage");
  UPipeForward result;
  result.schedule = schedule;
  auto& state = result.state;
  state.valid = true;
  state.causal = causal;
  state.schedule = schedule;
  state.qkv = qkv;

  ShardedActivation k_res, v_res;
  for (std::size_t st = 0; st < schedule.stage_count(); ++st) {
    const auto& stage = schedule.stages[st];
    const int tag_stage = static_cast<int>(st);
    if (st == 0) {
      for (std::size_t d = 0; d < c; ++d) {
        out_buf[d] = mesh.alloc_tracked(d, "out_buf", BufferCategory::output, unit, Phase::inp_a2a, tag_stage);
      }
    }
    const bool sends_kv = !stage.kv_heads_to_send.empty();
    std::vector<Tensor> q_local, k_local, v_local;
    for (std::size_t d = 0; d < c; ++d) {
      q_local.push_back(qkv.q_heads(d, stage.q_heads));
      q_slot.bind(d, chunk, Phase::inp_a2a, tag_stage);
      if (sends_kv) {
        k_local.push_back(qkv.k_heads(d, stage.kv_heads_to_send));
        v_local.push_back(qkv.v_heads(d, stage.kv_heads_to_send));
        k_slot.bind(d, chunk, Phase::inp_a2a, tag_stage);
        v_slot.bind(d, chunk, Phase::inp_a2a, tag_stage);
      }
    }
    const Shape local_shape{model.seq_len, u, model.head_dim};
    const auto q_h = all_to_all_seq_to_head(mesh, seq_activation(std::move(q_local), local_shape), groups,
                                            {"q", Phase::inp_a2a, tag_stage});
    if (sends_kv) {
      k_res = all_to_all_seq_to_head(mesh, seq_activation(std::move(k_local), local_shape), groups,
                                     {"k", Phase::inp_a2a, tag_stage});
      v_res = all_to_all_seq_to_head(mesh, seq_activation(std::move(v_local), local_shape), groups,
                                     {"v", Phase::inp_a2a, tag_stage});
    } else if (k_res.shards.empty()) {
      throw LedgerError("stage " + std::to_string(st) + " reuses key/values that were never sent");
    }

    std::vector<Tensor> outs, lses;
    for (std::size_t d = 0; d < c; ++d) {
      auto p = attention_partial(q_h.shards[d], k_res.shards[d], v_res.shards[d], local, CausalWindow{causal, 0, 0});
      outs.push_back(std::move(p.out));
      lses.push_back(std::move(p.lse));
      mesh.memory().mark(d, Phase::attn_kernel, tag_stage);
    }
    state.out.push_back(std::move(outs));
    state.lse.push_back(std::move(lses));
  }
  const int last = static_cast<int>(schedule.stage_count()) - 1;
  for (std::size_t d = 0; d < c; ++d) mesh.free_tracked(input[d], Phase::attn_kernel, last);
  q_slot.release(Phase::attn_kernel, last);
  k_slot.release(Phase::attn_kernel, last);
  v_slot.release(Phase::attn_kernel, last);

  std::vector<Tensor> final_out(c, Tensor({rows, model.q_heads, model.head_dim}));
  for (std::size_t st = 0; st < schedule.stage_count(); ++st) {
    const auto seq = all_to_all_head_to_seq(
        mesh, head_activation(state.out[st], stage_shape, all), {"out", Phase::out_a2a, static_cast<int>(st)},
        A2aOptions{A2aScratch::send_and_receive, {}, BufferCategory::attention_intermediate});
    for (std::size_t d = 0; d < c; ++d) scatter(final_out[d], seq.shards[d], 1, schedule.stages[st].q_heads);
  }
  for (std::size_t d = 0; d < c; ++d) mesh.free_tracked(out_buf[d], Phase::out_a2a, last);
  result.out = seq_activation(std::move(final_out), {model.seq_len, model.q_heads, model.head_dim});
  return result;
}

ShardedGrads run_upipe_backward(Mesh& mesh, const ModelConfig& model, const UPipeConfig& upipe,
                                const UPipeSavedState& state, const ShardedActivation& d_out) {
  if (!state.valid) throw LedgerError("UPipe backward requires the saved state of a forward run");
  const std::size_t c = mesh.device_count();
  model.validate(c);
  upipe.validate(model, c);
  const auto& schedule = state.schedule;
  if (schedule.heads_per_stage != upipe.heads_per_stage || state.out.size() != schedule.stage_count()) {
    throw ConfigError("saved state was produced with a different head schedule");
  }
  if (d_out.shards.size() != c || d_out.axis != ShardAxis::sequence) {
    throw ShapeError("backward inputs do not span the mesh");
  }
  const std::size_t rows = model.seq_len / c;
  const std::size_t u = upipe.heads_per_stage;
  const std::uint64_t unit = mesh.bytes_of(rows * model.d_model());
  const std::uint64_t chunk = mesh.bytes_of(rows * u * model.head_dim);
  const DeviceGroup all = mesh.all_devices();
  const std::vector<DeviceGroup> groups{all};
  const GqaMap local(u / c, u / c);
  const Shape stage_shape{model.seq_len, u, model.head_dim};
  const auto& qkv = state.qkv;

  std::vector<BufferHandle> input(c), dout_seq(c);
  for (std::size_t d = 0; d < c; ++d) {
    input[d] = mesh.alloc_tracked(d, "input_shard", BufferCategory::input, unit, Phase::pre_attn);
    dout_seq[d] = mesh.alloc_tracked(d, "d_out", BufferCategory::input, unit, Phase::pre_attn);
  }

  ShardedGrads grads;
  grads.dq = seq_activation(std::vector<Tensor>(c, Tensor({rows, model.q_heads, model.head_dim})),
                            {model.seq_len, model.q_heads, model.head_dim});
  grads.dk = seq_activation(std::vector<Tensor>(c, Tensor({rows, model.kv_heads, model.head_dim})),
                            {model.seq_len, model.kv_heads, model.head_dim});
  grads.dv = grads.dk;

  const std::size_t len = schedule.super_stage_length;
  const std::size_t supers = schedule.stage_count() / len;
  const A2aOptions exchange{A2aScratch::send_and_receive, {}, BufferCategory::attention_intermediate};
  for (std::size_t sr = supers; sr-- > 0;) {
    const std::size_t first = sr * len;
    const int first_tag = static_cast<int>(first);
    const auto kv_list = schedule.resident_kv(first);

    std::vector<Tensor> k_local, v_local;
    for (std::size_t d = 0; d < c; ++d) {
      k_local.push_back(qkv.k_heads(d, kv_list));
      v_local.push_back(qkv.v_heads(d, kv_list));
    }
    const auto k_h = all_to_all_seq_to_head(mesh, seq_activation(std::move(k_local), stage_shape), groups,
                                            {"bwd_k", Phase::attn_kernel, first_tag});
    const auto v_h = all_to_all_seq_to_head(mesh, seq_activation(std::move(v_local), stage_shape), groups,
                                            {"bwd_v", Phase::attn_kernel, first_tag});
    std::vector<Tensor> dk_acc(c, Tensor(k_h.shards.front().shape()));
    std::vector<Tensor> dv_acc(c, Tensor(v_h.shards.front().shape()));
    std::vector<BufferHandle> kv_bufs;
    for (std::size_t d = 0; d < c; ++d) {
      for (const char* label : {"k_stage", "v_stage", "dk_stage", "dv_stage"}) {
        kv_bufs.push_back(mesh.alloc_tracked(d, label, BufferCategory::attention_intermediate, chunk,
                                             Phase::attn_kernel, first_tag));
      }
    }

    for (std::size_t st = first; st < first + len; ++st) {
      const int tag = static_cast<int>(st);
      const auto& q_list = schedule.stages[st].q_heads;
      std::vector<BufferHandle> bufs;
      std::vector<Tensor> dout_local, q_local;
      for (std::size_t d = 0; d < c; ++d) {
        bufs.push_back(mesh.alloc_tracked(d, "d_out_stage", BufferCategory::attention_intermediate, chunk,
                                          Phase::out_a2a, tag));
        dout_local.push_back(take(d_out.shards[d], 1, q_list));
        q_local.push_back(qkv.q_heads(d, q_list));
      }
      const auto dout_h = all_to_all_seq_to_head(mesh, seq_activation(std::move(dout_local), stage_shape), groups,
                                                 {"bwd_d_out", Phase::out_a2a, tag});
      for (std::size_t d = 0; d < c; ++d) {
        for (const char* label : {"q_stage", "out_stage", "dq_stage"}) {
          bufs.push_back(mesh.alloc_tracked(d, label, BufferCategory::attention_intermediate, chunk,
                                            Phase::attn_kernel, tag));
        }
      }
      const auto q_h = all_to_all_seq_to_head(mesh, seq_activation(std::move(q_local), stage_shape), groups,
                                              {"bwd_q", Phase::attn_kernel, tag});

      std::vector<Tensor> dq_h;
      for (std::size_t d = 0; d < c; ++d) {
        auto g = attention_backward(q_h.shards[d], k_h.shards[d], v_h.shards[d], state.out[st][d],
                                    state.lse[st][d], dout_h.shards[d], local, CausalWindow{state.causal, 0, 0});
        dq_h.push_back(std::move(g.dq));
        for (std::size_t i = 0; i < g.dk.size(); ++i) {
          dk_acc[d][i] += g.dk[i];
          dv_acc[d][i] += g.dv[i];
        }
      }
      const auto dq = all_to_all_head_to_seq(mesh, head_activation(std::move(dq_h), stage_shape, all),
                                             {"bwd_dq", Phase::inp_a2a, tag}, exchange);
      for (std::size_t d = 0; d < c; ++d) scatter_add(grads.dq.shards[d], dq.shards[d], 1, q_list);
      for (const auto& h : bufs) mesh.free_tracked(h, Phase::inp_a2a, tag);
    }

    const int last_tag = static_cast<int>(first + len - 1);
    const auto dk = all_to_all_head_to_seq(mesh, head_activation(std::move(dk_acc), stage_shape, all),
                                           {"bwd_dk", Phase::inp_a2a, last_tag}, exchange);
    const auto dv = all_to_all_head_to_seq(mesh, head_activation(std::move(dv_acc), stage_shape, all),
                                           {"bwd_dv", Phase::inp_a2a, last_tag}, exchange);
    for (std::size_t d = 0; d < c; ++d) {
      scatter_add(grads.dk.shards[d], dk.shards[d], 1, kv_list);
      scatter_add(grads.dv.shards[d], dv.shards[d], 1, kv_list);
    }
    for (const auto& h : kv_bufs) mesh.free_tracked(h, Phase::inp_a2a, last_tag);
  }

  for (std::size_t d = 0; d < c; ++d) {
    mesh.free_tracked(dout_seq[d], Phase::inp_a2a);
    mesh.free_tracked(input[d], Phase::inp_a2a);
  }
  return grads;
}

std::uint64_t measured_head_transfers(const Mesh& mesh, const ModelConfig& model, std::size_t device) {
  const std::uint64_t head_shard = mesh.bytes_of(model.seq_len / mesh.device_count() * model.head_dim);
  std::uint64_t bytes = 0;
  for (const auto& e : mesh.comm().device(device).entries) {
    if (e.kind != CollectiveKind::all_to_all || e.phase != Phase::inp_a2a) continue;
    if (e.tensor == "q" || e.tensor == "k" || e.tensor == "v") bytes += e.bytes_sent;
  }
  return bytes / head_shard;
}

}  // namespace cpsim
