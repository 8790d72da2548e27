// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0
//
// Context-parallel attention executions on the simulated mesh: the
// single-device oracle, Ulysses (head resharding via all-to-all), Ring
// (key/value rotation with log-sum-exp merging), UPipe (Ulysses executed in
// stages of U heads with reused stage buffers), and the Ulysses x Ring hybrid.
//
// Memory accounting. One unit is one sequence shard of the hidden state,
// (S/C) * d_model * bytes_per_element bytes. Every engine charges:
//   "input_shard"   input                   1 unit, the attention block input
//   "q"/"k"/"v"     attention_intermediate  projected Q/K/V (gamma units)
//   "a2a_buf"       attention_intermediate  receive buffer of one in-flight tensor
//   "attn_out"      output                  attention output
//   "out_a2a_buf"   attention_intermediate  output all-to-all transfer buffers
// Ring adds "ring_k_buf"/"ring_v_buf" receive buffers. UPipe charges its Q/K/V
// at stage size in reusable slots ("q_stage", "k_stage", "v_stage") and a
// pre-allocated full "out_buf" in place of "attn_out".

#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "cpsim/attention.h"
#include "cpsim/mesh.h"
#include "cpsim/model.h"
#include "cpsim/schedule.h"

namespace cpsim {

// Random fixed projection weights, each [d_model, heads * head_dim].
struct Projection {
  Tensor w_q;
  Tensor w_k;
  Tensor w_v;
};

struct GlobalQkv {
  Tensor q;  // [S, H_q, d_head]
  Tensor k;  // [S, H_kv, d_head]
  Tensor v;  // [S, H_kv, d_head]
};

// x [S, d_model] -> global Q/K/V.
GlobalQkv project_global(const Tensor& x, const Projection& w, const ModelConfig& model);

// Where engines read per-device Q/K/V head slices from: either pre-formed
// sequence-sharded tensors, or a sequence-sharded hidden state projected on
// demand (one stage's heads at a time).
class QkvSource {
 public:
  QkvSource() = default;
  static QkvSource preformed(ShardedActivation q, ShardedActivation k, ShardedActivation v);
  static QkvSource projected(ShardedActivation x, Projection weights, std::size_t head_dim);

  bool empty() const { return !preformed_ && !projected_; }
  std::size_t device_count() const;
  std::size_t local_rows() const;

  // [S/C, heads.size(), d_head] slices of the device's shard.
  Tensor q_heads(std::size_t device, std::span<const std::size_t> heads) const;
  Tensor k_heads(std::size_t device, std::span<const std::size_t> heads) const;
  Tensor v_heads(std::size_t device, std::span<const std::size_t> heads) const;

  // Every head, sequence-sharded.
  ShardedActivation all_q() const;
  ShardedActivation all_k() const;
  ShardedActivation all_v() const;

 private:
  struct Preformed {
    ShardedActivation q, k, v;
  };
  struct Projected {
    ShardedActivation x;
    Projection w;
    std::size_t head_dim;
  };
  std::shared_ptr<const Preformed> preformed_;
  std::shared_ptr<const Projected> projected_;

  Tensor project(std::size_t device, const Tensor& w, std::span<const std::size_t> heads) const;
  ShardedActivation project_all(const Tensor& w) const;
};

// Contiguous equal row blocks, one per device.
ShardedActivation shard_sequence(const Tensor& x, const Mesh& mesh);

// Ground truth: reference forward on the global tensors.
Tensor run_oracle(const ModelConfig& model, const Tensor& q, const Tensor& k, const Tensor& v, bool causal);

struct EngineOptions {
  MergeFn merge = merge_partials;
};

// Saved head-layout tensors of a Ulysses forward, per device.
struct UlyssesSavedState {
  bool valid = false;
  bool causal = false;
  std::vector<DeviceGroup> groups;
  std::vector<Tensor> q, k, v, out, lse;
};

struct UlyssesForward {
  ShardedActivation out;  // sequence-sharded [S/C, H_q, d_head]
  UlyssesSavedState state;
};

struct ShardedGrads {
  ShardedActivation dq, dk, dv;
};

UlyssesForward run_ulysses_forward(Mesh& mesh, const ModelConfig& model, const QkvSource& qkv, bool causal);

ShardedGrads run_ulysses_backward(Mesh& mesh, const ModelConfig& model, const UlyssesSavedState& state,
                                  const ShardedActivation& d_out);

ShardedActivation run_ring_forward(Mesh& mesh, const ModelConfig& model, const QkvSource& qkv, bool causal,
                                   const EngineOptions& options = {});

// Uses the mesh's ulysses_degree x ring_degree factorisation.
ShardedActivation run_hybrid_forward(Mesh& mesh, const ModelConfig& model, const QkvSource& qkv, bool causal,
                                     const EngineOptions& options = {});

struct UPipeSavedState {
  bool valid = false;
  bool causal = false;
  HeadSchedule schedule;
  QkvSource qkv;
  // [stage][device] head-layout attention output and lse.
  std::vector<std::vector<Tensor>> out, lse;
};

struct UPipeForward {
  ShardedActivation out;
  HeadSchedule schedule;
  UPipeSavedState state;
};

UPipeForward run_upipe_forward(Mesh& mesh, const ModelConfig& model, const UPipeConfig& upipe,
                               const QkvSource& qkv, bool causal);

ShardedGrads run_upipe_backward(Mesh& mesh, const ModelConfig& model, const UPipeConfig& upipe,
                                const UPipeSavedState& state, const ShardedActivation& d_out);

// Single-head sequence shards sent by `device` during input all-to-alls
// (entries tagged q, k or v in the inp_a2a phase).
std::uint64_t measured_head_transfers(const Mesh& mesh, const ModelConfig& model, std::size_t device);

}  // namespace cpsim
