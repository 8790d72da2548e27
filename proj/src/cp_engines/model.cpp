// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include "cpsim/model.h"

#include <string>

#include "cpsim/error.h"

namespace cpsim {

void ModelConfig::validate(std::size_t devices) const {
  if (seq_len == 0 || q_heads == 0 || kv_heads == 0 || head_dim == 0) {
    throw ConfigError("constraint \"positive model extents\" violated: S=" + std::to_string(seq_len) +
                      ", H_q=" + std::to_string(q_heads) + ", H_kv=" + std::to_string(kv_heads) +
                      ", d_head=" + std::to_string(head_dim));
  }
  if (q_heads % kv_heads != 0) {
    throw ConfigError("constraint \"H_q divisible by H_kv\" violated: H_q=" + std::to_string(q_heads) +
                      ", H_kv=" + std::to_string(kv_heads));
  }
  if (devices == 0) throw ConfigError("constraint \"C > 0\" violated: C=0");
  if (seq_len % devices != 0) {
    throw ConfigError("constraint \"S divisible by C\" violated: S=" + std::to_string(seq_len) +
                      ", C=" + std::to_string(devices));
  }
}

void UPipeConfig::validate(const ModelConfig& model, std::size_t devices) const {
  const std::size_t u = heads_per_stage;
  if (u == 0) throw ConfigError("constraint \"U > 0\" violated: U=0");
  if (u % devices != 0) {
    throw ConfigError("constraint \"U divisible by C\" violated: U=" + std::to_string(u) +
                      ", C=" + std::to_string(devices));
  }
  if (model.q_heads % u != 0) {
    throw ConfigError("constraint \"H_q divisible by U\" violated: H_q=" + std::to_string(model.q_heads) +
                      ", U=" + std::to_string(u));
  }
}

}  // namespace cpsim
