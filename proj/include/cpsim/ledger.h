// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-device communication and memory ledgers of the simulated mesh.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cpsim {

// Execution phase of an attention block, in forward order.
enum class Phase { pre_attn = 0, inp_a2a = 1, attn_kernel = 2, out_a2a = 3 };
inline constexpr std::size_t kPhaseCount = 4;
inline constexpr std::array<Phase, kPhaseCount> kAllPhases = {Phase::pre_attn, Phase::inp_a2a,
                                                              Phase::attn_kernel, Phase::out_a2a};
std::string_view phase_name(Phase p);
std::optional<Phase> parse_phase(std::string_view name);

enum class CollectiveKind { all_to_all, ring_shift };
std::string_view collective_name(CollectiveKind k);

// Which running totals a buffer contributes to. Every labelled buffer counts
// towards the live total; only attention_intermediate feeds the
// intermediate peak.
enum class BufferCategory { input, attention_intermediate, output };
std::string_view category_name(BufferCategory c);

struct CommEntry {
  CollectiveKind kind = CollectiveKind::all_to_all;
  std::string tensor;
  Phase phase = Phase::inp_a2a;
  int stage = -1;
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;

  bool operator==(const CommEntry&) const = default;
};

struct DeviceComm {
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::vector<CommEntry> entries;

  bool operator==(const DeviceComm&) const = default;
};

class CommLedger {
 public:
  explicit CommLedger(std::size_t devices = 0) : devices_(devices) {}

  void record(std::size_t device, CommEntry entry);

  const DeviceComm& device(std::size_t d) const { return devices_.at(d); }
  std::size_t device_count() const { return devices_.size(); }
  std::uint64_t total_sent() const;
  std::uint64_t total_received() const;

  bool operator==(const CommLedger&) const = default;

 private:
  std::vector<DeviceComm> devices_;
};

struct BufferHandle {
  std::size_t device = 0;
  std::size_t slot = 0;

  bool operator==(const BufferHandle&) const = default;
};

enum class MemoryEventKind { alloc, free, rebind, mark };
std::string_view memory_event_name(MemoryEventKind k);

struct MemoryEvent {
  MemoryEventKind kind = MemoryEventKind::mark;
  std::string label;
  BufferCategory category = BufferCategory::attention_intermediate;
  std::uint64_t bytes = 0;
  Phase phase = Phase::pre_attn;
  int stage = -1;
  std::uint64_t live_total = 0;         // after the event
  std::uint64_t live_intermediate = 0;  // after the event

  bool operator==(const MemoryEvent&) const = default;
};

struct DeviceMemory {
  std::map<std::string, std::uint64_t> live_by_label;
  std::uint64_t live_total = 0;
  std::uint64_t live_intermediate = 0;
  std::uint64_t peak_total = 0;
  std::uint64_t peak_intermediate = 0;
  // Largest live total observed at events tagged with each phase.
  std::array<std::uint64_t, kPhaseCount> phase_peak_total{};
  std::array<std::uint64_t, kPhaseCount> phase_peak_intermediate{};
  std::vector<MemoryEvent> events;

  bool operator==(const DeviceMemory&) const = default;
};

// Labelled allocator. A handle names a reusable slot: freeing it releases
// its bytes, and rebinding a released slot to content of the same size
// charges the bytes again without creating a new slot. Rebinding a live slot
// to same-size content charges nothing.
class MemoryLedger {
 public:
  explicit MemoryLedger(std::size_t devices = 0) : devices_(devices) {}

  BufferHandle alloc(std::size_t device, std::string label, BufferCategory category,
                     std::uint64_t bytes, Phase phase, int stage = -1);
  void free(BufferHandle handle, Phase phase, int stage = -1);
  void rebind(BufferHandle handle, std::uint64_t bytes, Phase phase, int stage = -1);
  // Records an observation of the current live totals without changing them.
  void mark(std::size_t device, Phase phase, int stage = -1);

  bool is_live(BufferHandle handle) const;

  const DeviceMemory& device(std::size_t d) const { return devices_.at(d).memory; }
  std::size_t device_count() const { return devices_.size(); }

  bool operator==(const MemoryLedger&) const = default;

 private:
  struct Slot {
    std::string label;
    BufferCategory category;
    std::uint64_t bytes;
    bool live;

    bool operator==(const Slot&) const = default;
  };
  struct DeviceState {
    DeviceMemory memory;
    std::vector<Slot> slots;

    bool operator==(const DeviceState&) const = default;
  };

  DeviceState& state(std::size_t device);
  Slot& slot(BufferHandle handle);
  void charge(DeviceState& s, const Slot& slot, bool add);
  void observe(DeviceState& s, MemoryEventKind kind, const Slot* slot, std::uint64_t bytes, Phase phase,
               int stage);

  std::vector<DeviceState> devices_;
};

}  // namespace cpsim
