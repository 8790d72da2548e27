// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0
//
// Lockstep simulation of a C-device mesh. Collectives move tensors between
// per-device shards and charge the communication ledger; engines charge the
// memory ledger through the tracked allocator.
//
// Device d sits at ulysses rank d % ulysses_degree and ring rank
// d / ulysses_degree, so each Ulysses group is a contiguous block of devices
// and therefore a contiguous block of the sequence.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cpsim/ledger.h"
#include "cpsim/tensor.h"

namespace cpsim {

struct MeshConfig {
  std::size_t devices = 1;
  std::size_t ulysses_degree = 1;
  std::size_t ring_degree = 1;
  std::size_t bytes_per_element = 2;

  void validate() const;
  bool operator==(const MeshConfig&) const = default;
};

using DeviceGroup = std::vector<std::size_t>;

class Mesh {
 public:
  explicit Mesh(MeshConfig config);

  const MeshConfig& config() const { return config_; }
  std::size_t device_count() const { return config_.devices; }
  std::size_t bytes_per_element() const { return config_.bytes_per_element; }

  std::vector<DeviceGroup> ulysses_groups() const;
  std::vector<DeviceGroup> ring_groups() const;
  // Every device in one group, in device order.
  DeviceGroup all_devices() const;

  CommLedger& comm() { return comm_; }
  const CommLedger& comm() const { return comm_; }
  MemoryLedger& memory() { return memory_; }
  const MemoryLedger& memory() const { return memory_; }

  std::uint64_t bytes_of(std::size_t elements) const { return elements * config_.bytes_per_element; }

  BufferHandle alloc_tracked(std::size_t device, std::string label, BufferCategory category,
                             std::uint64_t bytes, Phase phase, int stage = -1) {
    return memory_.alloc(device, std::move(label), category, bytes, phase, stage);
  }
  void free_tracked(BufferHandle handle, Phase phase, int stage = -1) { memory_.free(handle, phase, stage); }

 private:
  MeshConfig config_;
  CommLedger comm_;
  MemoryLedger memory_;
};

Mesh create_mesh(const MeshConfig& config);

struct LedgerReport {
  CommLedger comm;
  MemoryLedger memory;

  bool operator==(const LedgerReport&) const = default;
};

LedgerReport ledger_report(const Mesh& mesh);

enum class ShardAxis { sequence, head };

// Per-device shards of a [S, H, d_head] (or [S, d_model]) tensor.
//
// axis == sequence: device d holds rows [d*S/C, (d+1)*S/C).
// axis == head: devices are partitioned into groups; group g holds the
// contiguous sequence block g and member i of a group holds the i-th equal
// slice of the heads over that block.
struct ShardedActivation {
  std::vector<Tensor> shards;
  ShardAxis axis = ShardAxis::sequence;
  Shape global_shape;
  std::vector<DeviceGroup> groups;  // only meaningful for axis == head

  std::size_t device_count() const { return shards.size(); }
  std::size_t total_elements() const;
  // Reassembles the global tensor.
  Tensor gather() const;

  bool operator==(const ShardedActivation&) const = default;
};

// Splits rows into equal contiguous blocks over `devices` shards.
ShardedActivation shard_rows(const Tensor& global, std::size_t devices);

struct CollectiveTag {
  std::string tensor;
  Phase phase = Phase::inp_a2a;
  int stage = -1;
};

// Transfer buffers charged to the memory ledger around an all-to-all.
enum class A2aScratch {
  none,              // data lands directly in a caller-owned buffer
  receive,           // one receive buffer of the payload size
  send_and_receive,  // separate send and receive buffers
};

struct A2aOptions {
  A2aScratch scratch = A2aScratch::receive;
  std::string label;  // defaults to "a2a_buf" / "out_a2a_buf"
  BufferCategory category = BufferCategory::attention_intermediate;
};

// Within each group, moves from sequence sharding to head sharding: member i
// ends with heads [i*h/n, (i+1)*h/n) over the group's concatenated sequence.
// Each device is charged (n-1)/n of its payload as sent and received; the
// self block is not charged. Groups of size one are an identity and charge
// nothing.
ShardedActivation all_to_all_seq_to_head(Mesh& mesh, const ShardedActivation& x,
                                         std::span<const DeviceGroup> groups, const CollectiveTag& tag,
                                         const A2aOptions& options = {});

// Exact inverse of all_to_all_seq_to_head.
ShardedActivation all_to_all_head_to_seq(Mesh& mesh, const ShardedActivation& x, const CollectiveTag& tag,
                                         const A2aOptions& options = {});

// Ring position i receives position (i-1 mod n)'s tensor. Each device is
// charged its full payload as sent and received. A one-device ring is an
// identity and charges nothing.
std::vector<Tensor> ring_shift(Mesh& mesh, std::span<const Tensor> by_position, const DeviceGroup& ring,
                               const CollectiveTag& tag);

}  // namespace cpsim
