// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include "cpsim/schedule.h"

#include <algorithm>
#include <set>
#include <string>

#include "cpsim/attention.h"
#include "cpsim/error.h"

namespace cpsim {

namespace {

void fill_placement(HeadSchedule& s) {
  s.placement.assign(s.q_heads, HeadSlot{});
  for (std::size_t st = 0; st < s.stages.size(); ++st) {
    for (std::size_t i = 0; i < s.stages[st].q_heads.size(); ++i) {
      s.placement.at(s.stages[st].q_heads[i]) = HeadSlot{st, i};
    }
  }
}

}  // namespace

std::vector<std::size_t> HeadSchedule::resident_kv(std::size_t stage) const {
  const std::size_t first = stage - stage % super_stage_length;
  return stages.at(first).kv_heads_to_send;
}

HeadSchedule sequential_schedule(std::size_t q_heads, std::size_t kv_heads, std::size_t heads_per_stage) {
  const GqaMap gqa(q_heads, kv_heads);
  if (heads_per_stage == 0 || q_heads % heads_per_stage != 0) {
    throw ConfigError("constraint \"H_q divisible by U\" violated: H_q=" + std::to_string(q_heads) +
                      ", U=" + std::to_string(heads_per_stage));
  }
  HeadSchedule s;
  s.q_heads = q_heads;
  s.kv_heads = kv_heads;
  s.heads_per_stage = heads_per_stage;
  s.super_stage_length = 1;
  s.naive_fallback = gqa.ratio() > 1;
  for (std::size_t st = 0; st < q_heads / heads_per_stage; ++st) {
    StageHeads stage;
    for (std::size_t i = 0; i < heads_per_stage; ++i) {
      const std::size_t h = st * heads_per_stage + i;
      stage.q_heads.push_back(h);
      stage.kv_heads_to_send.push_back(gqa.kv_head(h));
    }
    s.stages.push_back(std::move(stage));
  }
  fill_placement(s);
  return s;
}

HeadSchedule build_gqa_schedule(std::size_t q_heads, std::size_t kv_heads, std::size_t devices,
                                std::size_t heads_per_stage) {
  const GqaMap gqa(q_heads, kv_heads);
  if (devices == 0) throw ConfigError("constraint \"C > 0\" violated: C=0");
  if (heads_per_stage != devices) {
    throw ConfigError("constraint \"U == C\" violated for the grouped schedule: U=" +
                      std::to_string(heads_per_stage) + ", C=" + std::to_string(devices));
  }
  if (q_heads % devices != 0) {
    throw ConfigError("constraint \"H_q divisible by U\" violated: H_q=" + std::to_string(q_heads) +
                      ", U=" + std::to_string(heads_per_stage));
  }
  const std::size_t r = gqa.ratio();
  if (r == 1 || kv_heads % devices != 0) return sequential_schedule(q_heads, kv_heads, heads_per_stage);

  HeadSchedule s;
  s.q_heads = q_heads;
  s.kv_heads = kv_heads;
  s.heads_per_stage = heads_per_stage;
  s.super_stage_length = r;
  s.grouped = true;
  for (std::size_t super = 0; super < kv_heads / devices; ++super) {
    std::vector<std::size_t> kv;
    for (std::size_t c = 0; c < devices; ++c) kv.push_back(super * devices + c);
    for (std::size_t step = 0; step < r; ++step) {
      StageHeads stage;
      for (auto head : kv) stage.q_heads.push_back(head * r + step);
      if (step == 0) stage.kv_heads_to_send = kv;
      s.stages.push_back(std::move(stage));
    }
  }
  fill_placement(s);
  return s;
}

HeadSchedule upipe_schedule(std::size_t q_heads, std::size_t kv_heads, std::size_t devices,
                            std::size_t heads_per_stage) {
  if (heads_per_stage == devices) return build_gqa_schedule(q_heads, kv_heads, devices, heads_per_stage);
  return sequential_schedule(q_heads, kv_heads, heads_per_stage);
}

std::vector<std::string> schedule_violations(const HeadSchedule& s) {
  std::vector<std::string> v;
  if (s.kv_heads == 0 || s.q_heads % s.kv_heads != 0 || s.super_stage_length == 0) {
    v.push_back("malformed head counts");
    return v;
  }
  const std::size_t r = s.q_heads / s.kv_heads;
  std::vector<int> seen(s.q_heads, 0);
  for (std::size_t st = 0; st < s.stages.size(); ++st) {
    const auto& stage = s.stages[st];
    if (stage.q_heads.size() != s.heads_per_stage) {
      v.push_back("stage " + std::to_string(st) + " has " + std::to_string(stage.q_heads.size()) +
                  " query heads, expected " + std::to_string(s.heads_per_stage));
    }
    for (auto h : stage.q_heads) {
      if (h >= s.q_heads) {
        v.push_back("stage " + std::to_string(st) + " names query head " + std::to_string(h) + " out of range");
      } else {
        ++seen[h];
      }
    }
  }
  for (std::size_t h = 0; h < s.q_heads; ++h) {
    if (seen[h] != 1) {
      v.push_back("query head " + std::to_string(h) + " appears " + std::to_string(seen[h]) + " times");
    }
  }
  if (s.stages.size() % s.super_stage_length != 0) {
    v.push_back("stage count is not a multiple of the super-stage length");
    return v;
  }
  for (std::size_t first = 0; first < s.stages.size(); first += s.super_stage_length) {
    const auto& sent = s.stages[first].kv_heads_to_send;
    if (s.grouped) {
      const std::set<std::size_t> distinct(sent.begin(), sent.end());
      if (distinct.size() != sent.size()) {
        v.push_back("super-stage at stage " + std::to_string(first) + " sends a key/value head twice");
      }
    }
    for (std::size_t st = first; st < first + s.super_stage_length; ++st) {
      const auto& stage = s.stages[st];
      if (st != first && !stage.kv_heads_to_send.empty()) {
        v.push_back("stage " + std::to_string(st) + " re-sends key/value heads inside its super-stage");
      }
      if (sent.size() != stage.q_heads.size()) {
        v.push_back("stage " + std::to_string(st) + " has no resident key/value head for every slot");
        continue;
      }
      for (std::size_t i = 0; i < stage.q_heads.size(); ++i) {
        if (stage.q_heads[i] / r != sent[i]) {
          v.push_back("stage " + std::to_string(st) + " slot " + std::to_string(i) + ": query head " +
                      std::to_string(stage.q_heads[i]) + " needs key/value head " +
                      std::to_string(stage.q_heads[i] / r) + ", resident is " + std::to_string(sent[i]));
        }
      }
    }
  }
  if (s.placement.size() != s.q_heads) {
    v.push_back("placement map does not cover every query head");
  } else {
    for (std::size_t h = 0; h < s.q_heads; ++h) {
      const auto& p = s.placement[h];
      if (p.stage >= s.stages.size() || p.slot >= s.stages[p.stage].q_heads.size() ||
          s.stages[p.stage].q_heads[p.slot] != h) {
        v.push_back("placement of query head " + std::to_string(h) + " is wrong");
      }
    }
  }
  return v;
}

std::uint64_t gqa_comm_volume(std::size_t q_heads, std::size_t kv_heads, std::size_t devices, bool scheduled) {
  const GqaMap gqa(q_heads, kv_heads);
  if (devices == 0) throw ConfigError("constraint \"C > 0\" violated: C=0");
  if (q_heads % devices != 0) {
    throw ConfigError("constraint \"H_q divisible by C\" violated: H_q=" + std::to_string(q_heads) +
                      ", C=" + std::to_string(devices));
  }
  const std::uint64_t c = devices;
  if (!scheduled) return 3 * (q_heads / c) * (c - 1);
  if (kv_heads % devices != 0) {
    throw ConfigError("constraint \"H_kv divisible by C\" violated for the grouped schedule: H_kv=" +
                      std::to_string(kv_heads) + ", C=" + std::to_string(devices));
  }
  const std::uint64_t r = gqa.ratio();
  return (3 + r - 1) * (q_heads / (c * r)) * (c - 1);
}

}  // namespace cpsim
