// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include <numeric>
#include <string>

#include "cpsim/engines.h"
#include "cpsim/error.h"

namespace cpsim {

namespace {

// Key/value heads are replicated by f = n / gcd(n, H_kv) so that a group of
// n devices can split them; f always divides R.
std::size_t kv_replication(std::size_t kv_heads, std::size_t group) { return group / std::gcd(group, kv_heads); }

std::vector<std::size_t> replicated_index(std::size_t kv_heads, std::size_t f) {
  std::vector<std::size_t> idx;
  for (std::size_t j = 0; j < kv_heads; ++j) {
    for (std::size_t c = 0; c < f; ++c) idx.push_back(j);
  }
  return idx;
}

ShardedActivation expand_heads(const ShardedActivation& x, std::span<const std::size_t> idx) {
  ShardedActivation y = x;
  for (auto& s : y.shards) s = take(s, 1, idx);
  if (y.global_shape.size() == 3) y.global_shape[1] = idx.size();
  return y;
}

struct ForwardResult {
  ShardedActivation out;
  UlyssesSavedState state;
};

// Ulysses resharding inside each group of `ugroups`, then ring rotation of
// key/value blocks inside each group of `rgroups`. Ring position p of a ring
// group holds sequence block p of size S / r.
ForwardResult forward_core(Mesh& mesh, const ModelConfig& model, const QkvSource& qkv, bool causal,
                           const std::vector<DeviceGroup>& ugroups, const std::vector<DeviceGroup>& rgroups,
                           const MergeFn& merge) {
  const std::size_t c = mesh.device_count();
  model.validate(c);
  if (qkv.empty() || qkv.device_count() != c) throw ShapeError("q/k/v source does not span the mesh");
  const std::size_t a = ugroups.front().size();
  const std::size_t r = rgroups.front().size();
  if (model.q_heads % a != 0) {
    throw ConfigError("constraint \"H_q divisible by ulysses degree\" violated: H_q=" +
                      std::to_string(model.q_heads) + ", degree=" + std::to_string(a));
  }
  const std::size_t rows = model.seq_len / c;
  const std::size_t unit = mesh.bytes_of(rows * model.d_model());

  std::vector<BufferHandle> input(c);
  for (std::size_t d = 0; d < c; ++d) {
    input[d] = mesh.alloc_tracked(d, "input_shard", BufferCategory::input, unit, Phase::pre_attn);
  }

  ShardedActivation q_seq = qkv.all_q();
  ShardedActivation k_seq = qkv.all_k();
  ShardedActivation v_seq = qkv.all_v();
  const std::size_t f = kv_replication(model.kv_heads, a);
  if (f > 1) {
    const auto idx = replicated_index(model.kv_heads, f);
    k_seq = expand_heads(k_seq, idx);
    v_seq = expand_heads(v_seq, idx);
  }

  std::vector<BufferHandle> hq(c), hk(c), hv(c);
  for (std::size_t d = 0; d < c; ++d) {
    hq[d] = mesh.alloc_tracked(d, "q", BufferCategory::attention_intermediate,
                               mesh.bytes_of(q_seq.shards[d].size()), Phase::inp_a2a);
    hk[d] = mesh.alloc_tracked(d, "k", BufferCategory::attention_intermediate,
                               mesh.bytes_of(k_seq.shards[d].size()), Phase::inp_a2a);
    hv[d] = mesh.alloc_tracked(d, "v", BufferCategory::attention_intermediate,
                               mesh.bytes_of(v_seq.shards[d].size()), Phase::inp_a2a);
  }
  const auto q_h = all_to_all_seq_to_head(mesh, q_seq, ugroups, {"q", Phase::inp_a2a, -1});
  const auto k_h = all_to_all_seq_to_head(mesh, k_seq, ugroups, {"k", Phase::inp_a2a, -1});
  const auto v_h = all_to_all_seq_to_head(mesh, v_seq, ugroups, {"v", Phase::inp_a2a, -1});

  std::vector<BufferHandle> out_buf(c);
  for (std::size_t d = 0; d < c; ++d) {
    out_buf[d] = mesh.alloc_tracked(d, "attn_out", BufferCategory::output, mesh.bytes_of(q_seq.shards[d].size()),
                                    Phase::attn_kernel);
  }

  const GqaMap local(model.q_heads / a, model.kv_heads * f / a);
  const std::size_t block = model.seq_len / r;
  std::vector<AttentionPartial> acc(c);
  for (std::size_t d = 0; d < c; ++d) {
    acc[d] = AttentionPartial::empty(q_h.shards[d].dim(0), local.q_heads(), model.head_dim);
  }

  std::vector<BufferHandle> ring_bufs;
  if (r > 1) {
    for (std::size_t d = 0; d < c; ++d) {
      ring_bufs.push_back(mesh.alloc_tracked(d, "ring_k_buf", BufferCategory::attention_intermediate,
                                             mesh.bytes_of(k_h.shards[d].size()), Phase::attn_kernel));
      ring_bufs.push_back(mesh.alloc_tracked(d, "ring_v_buf", BufferCategory::attention_intermediate,
                                             mesh.bytes_of(v_h.shards[d].size()), Phase::attn_kernel));
    }
  }

  for (const auto& ring : rgroups) {
    std::vector<Tensor> k_cur, v_cur;
    for (auto d : ring) {
      k_cur.push_back(k_h.shards[d]);
      v_cur.push_back(v_h.shards[d]);
    }
    for (std::size_t t = 0; t < r; ++t) {
      for (std::size_t p = 0; p < r; ++p) {
        const std::size_t j = (p + r - t) % r;
        if (causal && j > p) continue;
        const std::size_t d = ring[p];
        const CausalWindow window{causal, p * block, j * block};
        acc[d] = merge(acc[d], attention_partial(q_h.shards[d], k_cur[p], v_cur[p], local, window));
      }
      if (t + 1 < r) {
        k_cur = ring_shift(mesh, k_cur, ring, {"k", Phase::attn_kernel, static_cast<int>(t)});
        v_cur = ring_shift(mesh, v_cur, ring, {"v", Phase::attn_kernel, static_cast<int>(t)});
      }
    }
  }
  for (std::size_t d = 0; d < c; ++d) mesh.memory().mark(d, Phase::attn_kernel);
  for (const auto& h : ring_bufs) mesh.free_tracked(h, Phase::attn_kernel);

  ForwardResult result;
  if (r == 1) {
    auto& s = result.state;
    s.valid = true;
    s.causal = causal;
    s.groups = ugroups;
    s.q = q_h.shards;
    s.k = k_h.shards;
    s.v = v_h.shards;
    for (const auto& p : acc) {
      s.out.push_back(p.out);
      s.lse.push_back(p.lse);
    }
  }

  for (std::size_t d = 0; d < c; ++d) {
    mesh.free_tracked(hq[d], Phase::attn_kernel);
    mesh.free_tracked(hk[d], Phase::attn_kernel);
    mesh.free_tracked(hv[d], Phase::attn_kernel);
  }
  ShardedActivation out_h;
  out_h.axis = ShardAxis::head;
  out_h.global_shape = {model.seq_len, model.q_heads, model.head_dim};
  out_h.groups = ugroups;
  for (auto& p : acc) out_h.shards.push_back(std::move(p.out));
  result.out = all_to_all_head_to_seq(mesh, out_h, {"out", Phase::out_a2a, -1});

  for (std::size_t d = 0; d < c; ++d) {
    mesh.free_tracked(out_buf[d], Phase::out_a2a);
    mesh.free_tracked(input[d], Phase::out_a2a);
  }
  return result;
}

std::vector<DeviceGroup> singletons(std::size_t c) {
  std::vector<DeviceGroup> g(c);
  for (std::size_t d = 0; d < c; ++d) g[d] = {d};
  return g;
}

}  // namespace

UlyssesForward run_ulysses_forward(Mesh& mesh, const ModelConfig& model, const QkvSource& qkv, bool causal) {
  const std::vector<DeviceGroup> all{mesh.all_devices()};
  auto r = forward_core(mesh, model, qkv, causal, all, singletons(mesh.device_count()), merge_partials);
  return UlyssesForward{std::move(r.out), std::move(r.state)};
}

ShardedActivation run_ring_forward(Mesh& mesh, const ModelConfig& model, const QkvSource& qkv, bool causal,
                                   const EngineOptions& options) {
  const std::vector<DeviceGroup> ring{mesh.all_devices()};
  return forward_core(mesh, model, qkv, causal, singletons(mesh.device_count()), ring, options.merge).out;
}

ShardedActivation run_hybrid_forward(Mesh& mesh, const ModelConfig& model, const QkvSource& qkv, bool causal,
                                     const EngineOptions& options) {
  return forward_core(mesh, model, qkv, causal, mesh.ulysses_groups(), mesh.ring_groups(), options.merge).out;
}

ShardedGrads run_ulysses_backward(Mesh& mesh, const ModelConfig& model, const UlyssesSavedState& state,
                                  const ShardedActivation& d_out) {
  if (!state.valid) throw LedgerError("Ulysses backward requires the saved state of a forward run");
  const std::size_t c = mesh.device_count();
  model.validate(c);
  if (state.q.size() != c || d_out.shards.size() != c || d_out.axis != ShardAxis::sequence) {
    throw ShapeError("backward inputs do not span the mesh");
  }
  const std::size_t rows = model.seq_len / c;
  const std::size_t unit = mesh.bytes_of(rows * model.d_model());
  const std::size_t a = state.groups.front().size();

  std::vector<BufferHandle> input(c), dout_seq(c), dout_head(c);
  for (std::size_t d = 0; d < c; ++d) {
    input[d] = mesh.alloc_tracked(d, "input_shard", BufferCategory::input, unit, Phase::pre_attn);
    dout_seq[d] = mesh.alloc_tracked(d, "d_out", BufferCategory::input, unit, Phase::pre_attn);
  }
  for (std::size_t d = 0; d < c; ++d) {
    dout_head[d] = mesh.alloc_tracked(d, "d_out_head", BufferCategory::attention_intermediate, unit,
                                      Phase::out_a2a);
  }
  const auto dout_h = all_to_all_seq_to_head(mesh, d_out, state.groups, {"bwd_d_out", Phase::out_a2a, -1},
                                             A2aOptions{A2aScratch::none, {}, BufferCategory::attention_intermediate});

  std::vector<BufferHandle> kernel_bufs;
  const char* saved[] = {"q", "k", "v", "attn_out", "dq", "dk", "dv"};
  for (std::size_t d = 0; d < c; ++d) {
    const std::uint64_t sizes[] = {state.q[d].size(), state.k[d].size(), state.v[d].size(), state.out[d].size(),
                                   state.q[d].size(), state.k[d].size(), state.v[d].size()};
    for (std::size_t i = 0; i < 7; ++i) {
      kernel_bufs.push_back(mesh.alloc_tracked(d, saved[i], BufferCategory::attention_intermediate,
                                               mesh.bytes_of(sizes[i]), Phase::attn_kernel));
    }
  }

  ShardedGrads head;
  for (auto* x : {&head.dq, &head.dk, &head.dv}) {
    x->axis = ShardAxis::head;
    x->groups = state.groups;
  }
  const GqaMap local(state.q.front().dim(1), state.k.front().dim(1));
  for (std::size_t d = 0; d < c; ++d) {
    auto g = attention_backward(state.q[d], state.k[d], state.v[d], state.out[d], state.lse[d], dout_h.shards[d],
                                local, CausalWindow{state.causal, 0, 0});
    head.dq.shards.push_back(std::move(g.dq));
    head.dk.shards.push_back(std::move(g.dk));
    head.dv.shards.push_back(std::move(g.dv));
  }
  const std::size_t kv_sent = state.k.front().dim(1) * a;
  head.dq.global_shape = {model.seq_len, model.q_heads, model.head_dim};
  head.dk.global_shape = {model.seq_len, kv_sent, model.head_dim};
  head.dv.global_shape = head.dk.global_shape;

  for (std::size_t d = 0; d < c; ++d) {
    for (std::size_t i = 0; i < 7; ++i) {
      if (i < 4) mesh.free_tracked(kernel_bufs[d * 7 + i], Phase::inp_a2a);
    }
    mesh.free_tracked(dout_head[d], Phase::inp_a2a);
    mesh.free_tracked(dout_seq[d], Phase::inp_a2a);
  }

  ShardedGrads out;
  out.dq = all_to_all_head_to_seq(mesh, head.dq, {"bwd_dq", Phase::inp_a2a, -1});
  out.dk = all_to_all_head_to_seq(mesh, head.dk, {"bwd_dk", Phase::inp_a2a, -1});
  out.dv = all_to_all_head_to_seq(mesh, head.dv, {"bwd_dv", Phase::inp_a2a, -1});

  // Sum the gradients of replicated key/value heads back onto their source.
  const std::size_t f = kv_sent / model.kv_heads;
  if (f > 1) {
    const auto idx = replicated_index(model.kv_heads, f);
    for (auto* x : {&out.dk, &out.dv}) {
      for (auto& s : x->shards) {
        Tensor reduced({s.dim(0), model.kv_heads, model.head_dim});
        scatter_add(reduced, s, 1, idx);
        s = std::move(reduced);
      }
      x->global_shape[1] = model.kv_heads;
    }
  }

  for (std::size_t d = 0; d < c; ++d) {
    for (std::size_t i = 4; i < 7; ++i) mesh.free_tracked(kernel_bufs[d * 7 + i], Phase::inp_a2a);
    mesh.free_tracked(input[d], Phase::inp_a2a);
  }
  return out;
}

}  // namespace cpsim
