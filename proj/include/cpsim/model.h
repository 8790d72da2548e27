// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>

#include "cpsim/attention.h"

namespace cpsim {

// Transformer shape. d_model is always q_heads * head_dim.
struct ModelConfig {
  std::size_t seq_len = 0;
  std::size_t q_heads = 0;
  std::size_t kv_heads = 0;
  std::size_t head_dim = 0;
  std::size_t ffn_dim = 0;     // analytical use only
  std::size_t vocab_size = 0;  // analytical use only
  std::size_t layers = 1;      // analytical use only

  std::size_t d_model() const { return q_heads * head_dim; }
  std::size_t gqa_ratio() const { return q_heads / kv_heads; }
  GqaMap gqa() const { return GqaMap(q_heads, kv_heads); }

  // Positive extents, H_q divisible by H_kv, S divisible by `devices`.
  void validate(std::size_t devices) const;

  bool operator==(const ModelConfig&) const = default;
};

struct UPipeConfig {
  std::size_t heads_per_stage = 0;  // U

  std::size_t stages(std::size_t q_heads) const { return q_heads / heads_per_stage; }
  // U divisible by C and H_q divisible by U.
  void validate(const ModelConfig& model, std::size_t devices) const;

  bool operator==(const UPipeConfig&) const = default;
};

}  // namespace cpsim
