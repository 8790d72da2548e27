// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0
//
// Head schedules for staged (UPipe) attention.
//
// With grouped-query attention and one head per device per stage (U == C),
// the out-of-order schedule groups stages into super-stages of R = H_q/H_kv
// stages. The first stage of super-stage s sends the C key/value heads
// s*C .. s*C+C-1 together with query heads kv*R; stage r of the super-stage
// sends only the query heads kv*R + r and reuses the resident key/values.
//
// Otherwise stages take query heads in order and every stage sends one
// key/value head per query head (the naive schedule).

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace cpsim {

struct StageHeads {
  std::vector<std::size_t> q_heads;
  // Key/value heads communicated in this stage, one per stage slot when the
  // stage sends. Empty when the stage reuses resident key/values.
  std::vector<std::size_t> kv_heads_to_send;

  bool operator==(const StageHeads&) const = default;
};

struct HeadSlot {
  std::size_t stage = 0;
  std::size_t slot = 0;

  bool operator==(const HeadSlot&) const = default;
};

struct HeadSchedule {
  std::size_t q_heads = 0;
  std::size_t kv_heads = 0;
  std::size_t heads_per_stage = 0;
  std::vector<StageHeads> stages;
  // Stages per super-stage: R for the grouped schedule, 1 for naive.
  std::size_t super_stage_length = 1;
  bool grouped = false;
  // Set when grouped-query attention is active (R > 1) but the grouped
  // schedule could not be used and key/value heads are re-sent every stage.
  bool naive_fallback = false;
  // placement[h] = where query head h is processed.
  std::vector<HeadSlot> placement;

  std::size_t stage_count() const { return stages.size(); }
  std::size_t gqa_ratio() const { return q_heads / kv_heads; }
  // Key/value head for each slot of `stage`; this is the resident set for
  // stages that do not send.
  std::vector<std::size_t> resident_kv(std::size_t stage) const;

  bool operator==(const HeadSchedule&) const = default;
};

// Requires heads_per_stage == devices. Falls back to naive (flagged) when
// H_kv is not divisible by C.
HeadSchedule build_gqa_schedule(std::size_t q_heads, std::size_t kv_heads, std::size_t devices,
                                std::size_t heads_per_stage);

// In-order stages of `heads_per_stage` query heads, key/values re-sent each
// stage. Flags naive_fallback when R > 1.
HeadSchedule sequential_schedule(std::size_t q_heads, std::size_t kv_heads, std::size_t heads_per_stage);

// Schedule used by the UPipe engine: grouped when U == C, sequential
// otherwise.
HeadSchedule upipe_schedule(std::size_t q_heads, std::size_t kv_heads, std::size_t devices,
                            std::size_t heads_per_stage);

// Descriptions of violated schedule invariants; empty when the schedule is
// well-formed.
std::vector<std::string> schedule_violations(const HeadSchedule& schedule);

// Single-head sequence shards sent per device over the whole forward:
// naive 3*(H_q/C)*(C-1), grouped (3+R-1)*(H_q/(C*R))*(C-1).
std::uint64_t gqa_comm_volume(std::size_t q_heads, std::size_t kv_heads, std::size_t devices, bool scheduled);

}  // namespace cpsim
