// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0
//
// Exact softmax attention in double precision: forward, backward, the
// log-sum-exp merge of partial results, and a central-difference gradient
// probe used as a test oracle.
//
// Layout conventions:
//   q        [S_q, H_q,  d_head]
//   k, v     [S_k, H_kv, d_head]
//   out      [S_q, H_q,  d_head]
//   lse      [S_q, H_q]
// Scores are scaled by 1/sqrt(d_head). Under a causal window, query i
// attends key j iff key_offset + j <= query_offset + i.

#pragma once

#include <cstddef>
#include <functional>

#include "cpsim/tensor.h"

namespace cpsim {

// Query head h reads key/value head h / ratio().
class GqaMap {
 public:
  GqaMap(std::size_t q_heads, std::size_t kv_heads);

  std::size_t q_heads() const { return q_heads_; }
  std::size_t kv_heads() const { return kv_heads_; }
  std::size_t ratio() const { return q_heads_ / kv_heads_; }
  std::size_t kv_head(std::size_t q_head) const { return q_head / ratio(); }

  bool operator==(const GqaMap&) const = default;

 private:
  std::size_t q_heads_;
  std::size_t kv_heads_;
};

struct CausalWindow {
  bool causal = false;
  std::size_t query_offset = 0;
  std::size_t key_offset = 0;

  bool allows(std::size_t q_row, std::size_t k_row) const {
    return !causal || key_offset + k_row <= query_offset + q_row;
  }
};

// Running (out, lse) pair. A row with lse == -inf has seen no keys and its
// out row is all zeros.
struct AttentionPartial {
  Tensor out;
  Tensor lse;

  static AttentionPartial empty(std::size_t rows, std::size_t heads, std::size_t head_dim);
};

struct AttentionGrads {
  Tensor dq;
  Tensor dk;
  Tensor dv;
};

// Attention of q against one block of keys. Rows that the window masks out
// completely come back as the empty sentinel.
AttentionPartial attention_partial(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const GqaMap& gqa, const CausalWindow& window);

AttentionPartial reference_attention_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                             const GqaMap& gqa, bool causal);

AttentionGrads attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const Tensor& out, const Tensor& lse, const Tensor& d_out,
                                  const GqaMap& gqa, const CausalWindow& window);

// (out, lse) must come from reference_attention_forward on the same inputs.
AttentionGrads reference_attention_backward(const Tensor& q, const Tensor& k, const Tensor& v,
                                            const Tensor& out, const Tensor& lse,
                                            const Tensor& d_out, const GqaMap& gqa, bool causal);

AttentionPartial merge_partials(const AttentionPartial& a, const AttentionPartial& b);

using MergeFn = std::function<AttentionPartial(const AttentionPartial&, const AttentionPartial&)>;

// sum(out * cotangent) for the reference forward.
double attention_probe_loss(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& cotangent, const GqaMap& gqa, bool causal);

// Central differences of attention_probe_loss with respect to every entry of
// q, k and v. Refuses sweeps above 10^4 scalar entries.
AttentionGrads finite_difference_gradients(const Tensor& q, const Tensor& k, const Tensor& v,
                                           const Tensor& cotangent, const GqaMap& gqa,
                                           bool causal, double step);

// max|a - b| / max|b| over all three gradients; falls back to the absolute
// difference when the reference is identically zero.
double gradient_relative_error(const AttentionGrads& got, const AttentionGrads& reference);
double gradient_max_abs_diff(const AttentionGrads& a, const AttentionGrads& b);

}  // namespace cpsim
