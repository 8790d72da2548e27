// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0
//
// Closed-form activation memory of one attention block. Phase values are in
// units of d_model elements per device; multiply by d_model and the element
// width for bytes.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "cpsim/model.h"

namespace cpsim {

// gamma: Q+K+V relative to Q. beta: Q, K, V, Out, dOut, dQ, dK, dV relative
// to Q.
struct GqaFactors {
  double R = 1.0;
  double gamma = 3.0;
  double beta = 8.0;
};

GqaFactors gqa_factors(std::size_t ratio);

enum class MemoryMethod { ulysses, ulysses_offload, fpdt, upipe };
enum class Direction { forward, backward };

std::string_view method_name(MemoryMethod m);
MemoryMethod parse_memory_method(std::string_view name);  // ConfigError when unknown
std::string_view direction_name(Direction d);

struct MemoryParams {
  std::size_t seq_len = 0;  // S
  std::size_t devices = 1;  // C
  std::size_t layers = 1;   // L
  std::size_t ratio = 1;    // R
  std::optional<std::size_t> nu;  // UPipe stages
  std::optional<std::size_t> pi;  // FPDT chunks

  bool operator==(const MemoryParams&) const = default;
};

struct PhaseMemoryReport {
  MemoryMethod method = MemoryMethod::ulysses;
  Direction direction = Direction::forward;
  // Forward: before, inp_a2a, kernel, out_a2a.
  // Backward: before, out_a2a, kernel, inp_a2a.
  std::array<double, 4> phases{};
  MemoryParams params;
  GqaFactors factors;

  double peak() const;
  double bytes(std::size_t phase, std::size_t d_model, std::size_t bytes_per_element) const {
    return phases.at(phase) * static_cast<double>(d_model * bytes_per_element);
  }
  static std::array<std::string_view, 4> phase_labels(Direction d);
};

PhaseMemoryReport attn_fwd_peak(MemoryMethod method, const MemoryParams& params);
PhaseMemoryReport attn_bwd_peak(MemoryMethod method, const MemoryParams& params);

struct StageMemory {
  double inputs = 0;
  double intermediate = 0;
  double outputs = 0;
  double total = 0;
};

// Bytes per stage of the forward pass. Totals sum only the columns the
// breakdown counts: embedding outputs; attention inputs, QKV, all-to-all and
// outputs; FFN inputs, intermediate and outputs; cross-entropy intermediate.
struct Table1Breakdown {
  StageMemory embedding;
  StageMemory attention;
  StageMemory ffn;
  StageMemory cross_entropy;
  double token_id_bytes = 0;   // int32 ids, outside the embedding total
  double attention_qkv = 0;
  double attention_a2a = 0;
  double lse_bytes = 0;        // outside the attention total
};

Table1Breakdown table1_breakdown(const ModelConfig& model, std::size_t bytes_per_element);

struct UPipeSavings {
  std::uint64_t ulysses_bytes = 0;
  std::uint64_t upipe_bytes = 0;
  double reduction_ratio = 0;
};

// Intermediate attention bytes 12 * (S/C) * H * d_head at two bytes per
// element, with H = H_q for Ulysses and H = U for UPipe.
UPipeSavings upipe_savings(std::size_t q_heads, std::size_t devices, std::size_t heads_per_stage,
                           std::size_t seq_len, std::size_t head_dim, std::size_t bytes_per_element);

}  // namespace cpsim
