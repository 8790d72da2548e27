// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include "cpsim/ledger.h"

#include <algorithm>
#include <numeric>

#include "cpsim/error.h"

namespace cpsim {

std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::pre_attn: return "pre_attn";
    case Phase::inp_a2a: return "inp_a2a";
    case Phase::attn_kernel: return "attn_kernel";
    case Phase::out_a2a: return "out_a2a";
  }
  return "unknown";
}

std::optional<Phase> parse_phase(std::string_view name) {
  for (Phase p : kAllPhases) {
    if (phase_name(p) == name) return p;
  }
  return std::nullopt;
}

std::string_view collective_name(CollectiveKind k) {
  return k == CollectiveKind::all_to_all ? "all_to_all" : "ring_shift";
}

std::string_view category_name(BufferCategory c) {
  switch (c) {
    case BufferCategory::input: return "input";
    case BufferCategory::attention_intermediate: return "attention_intermediate";
    case BufferCategory::output: return "output";
  }
  return "unknown";
}

std::string_view memory_event_name(MemoryEventKind k) {
  switch (k) {
    case MemoryEventKind::alloc: return "alloc";
    case MemoryEventKind::free: return "free";
    case MemoryEventKind::rebind: return "rebind";
    case MemoryEventKind::mark: return "mark";
  }
  return "unknown";
}

void CommLedger::record(std::size_t device, CommEntry entry) {
  auto& d = devices_.at(device);
  d.bytes_sent += entry.bytes_sent;
  d.bytes_received += entry.bytes_received;
  d.entries.push_back(std::move(entry));
}

std::uint64_t CommLedger::total_sent() const {
  return std::accumulate(devices_.begin(), devices_.end(), std::uint64_t{0},
                         [](std::uint64_t acc, const DeviceComm& d) { return acc + d.bytes_sent; });
}

std::uint64_t CommLedger::total_received() const {
  return std::accumulate(devices_.begin(), devices_.end(), std::uint64_t{0},
                         [](std::uint64_t acc, const DeviceComm& d) { return acc + d.bytes_received; });
}

MemoryLedger::DeviceState& MemoryLedger::state(std::size_t device) {
  if (device >= devices_.size()) throw LedgerError("device " + std::to_string(device) + " out of range");
  return devices_[device];
}

MemoryLedger::Slot& MemoryLedger::slot(BufferHandle handle) {
  auto& s = state(handle.device);
  if (handle.slot >= s.slots.size()) throw LedgerError("unknown buffer handle");
  return s.slots[handle.slot];
}

void MemoryLedger::charge(DeviceState& s, const Slot& slot, bool add) {
  auto& m = s.memory;
  const bool intermediate = slot.category == BufferCategory::attention_intermediate;
  if (add) {
    m.live_by_label[slot.label] += slot.bytes;
    m.live_total += slot.bytes;
    if (intermediate) m.live_intermediate += slot.bytes;
  } else {
    auto it = m.live_by_label.find(slot.label);
    if (it == m.live_by_label.end() || it->second < slot.bytes || m.live_total < slot.bytes) {
      throw LedgerError("live bytes for '" + slot.label + "' would go negative");
    }
    it->second -= slot.bytes;
    if (it->second == 0) m.live_by_label.erase(it);
    m.live_total -= slot.bytes;
    if (intermediate) m.live_intermediate -= slot.bytes;
  }
}

void MemoryLedger::observe(DeviceState& s, MemoryEventKind kind, const Slot* slot, std::uint64_t bytes,
                           Phase phase, int stage) {
  auto& m = s.memory;
  m.peak_total = std::max(m.peak_total, m.live_total);
  m.peak_intermediate = std::max(m.peak_intermediate, m.live_intermediate);
  const auto p = static_cast<std::size_t>(phase);
  m.phase_peak_total[p] = std::max(m.phase_peak_total[p], m.live_total);
  m.phase_peak_intermediate[p] = std::max(m.phase_peak_intermediate[p], m.live_intermediate);
  MemoryEvent e;
  e.kind = kind;
  if (slot) {
    e.label = slot->label;
    e.category = slot->category;
  }
  e.bytes = bytes;
  e.phase = phase;
  e.stage = stage;
  e.live_total = m.live_total;
  e.live_intermediate = m.live_intermediate;
  m.events.push_back(std::move(e));
}

BufferHandle MemoryLedger::alloc(std::size_t device, std::string label, BufferCategory category,
                                 std::uint64_t bytes, Phase phase, int stage) {
  if (bytes == 0) throw LedgerError("allocation of zero bytes for '" + label + "'");
  auto& s = state(device);
  s.slots.push_back(Slot{std::move(label), category, bytes, true});
  const Slot& slot = s.slots.back();
  charge(s, slot, true);
  observe(s, MemoryEventKind::alloc, &slot, bytes, phase, stage);
  return BufferHandle{device, s.slots.size() - 1};
}

void MemoryLedger::free(BufferHandle handle, Phase phase, int stage) {
  Slot& sl = slot(handle);
  if (!sl.live) throw LedgerError("double free of '" + sl.label + "'");
  auto& s = state(handle.device);
  charge(s, sl, false);
  sl.live = false;
  observe(s, MemoryEventKind::free, &sl, sl.bytes, phase, stage);
}

void MemoryLedger::rebind(BufferHandle handle, std::uint64_t bytes, Phase phase, int stage) {
  Slot& sl = slot(handle);
  if (bytes != sl.bytes) {
    throw LedgerError("reuse of '" + sl.label + "' with " + std::to_string(bytes) + " bytes, slot holds " +
                      std::to_string(sl.bytes));
  }
  auto& s = state(handle.device);
  std::uint64_t charged = 0;
  if (!sl.live) {
    sl.live = true;
    charge(s, sl, true);
    charged = sl.bytes;
  }
  observe(s, MemoryEventKind::rebind, &sl, charged, phase, stage);
}

void MemoryLedger::mark(std::size_t device, Phase phase, int stage) {
  observe(state(device), MemoryEventKind::mark, nullptr, 0, phase, stage);
}

bool MemoryLedger::is_live(BufferHandle handle) const {
  const auto& s = devices_.at(handle.device);
  return handle.slot < s.slots.size() && s.slots[handle.slot].live;
}

}  // namespace cpsim
