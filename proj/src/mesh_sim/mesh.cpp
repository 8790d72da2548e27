// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include "cpsim/mesh.h"

#include <algorithm>
#include <string>

#include "cpsim/error.h"

namespace cpsim {

void MeshConfig::validate() const {
  if (devices == 0) throw ConfigError("constraint \"C > 0\" violated: C=0");
  if (ulysses_degree == 0 || ring_degree == 0) {
    throw ConfigError("constraint \"degrees > 0\" violated: ulysses_degree=" + std::to_string(ulysses_degree) +
                      ", ring_degree=" + std::to_string(ring_degree));
  }
  if (ulysses_degree * ring_degree != devices) {
    throw ConfigError("constraint \"C = ulysses_degree x ring_degree\" violated: " +
                      std::to_string(ulysses_degree) + " x " + std::to_string(ring_degree) +
                      " != " + std::to_string(devices));
  }
  if (bytes_per_element != 1 && bytes_per_element != 2 && bytes_per_element != 4 && bytes_per_element != 8) {
    throw ConfigError("constraint \"bytes_per_element in {1, 2, 4, 8}\" violated: bytes_per_element=" +
                      std::to_string(bytes_per_element));
  }
}

Mesh::Mesh(MeshConfig config) : config_(config) {
  config_.validate();
  comm_ = CommLedger(config_.devices);
  memory_ = MemoryLedger(config_.devices);
}

Mesh create_mesh(const MeshConfig& config) { return Mesh(config); }

std::vector<DeviceGroup> Mesh::ulysses_groups() const {
  std::vector<DeviceGroup> groups(config_.ring_degree);
  for (std::size_t r = 0; r < config_.ring_degree; ++r) {
    for (std::size_t u = 0; u < config_.ulysses_degree; ++u) groups[r].push_back(r * config_.ulysses_degree + u);
  }
  return groups;
}

std::vector<DeviceGroup> Mesh::ring_groups() const {
  std::vector<DeviceGroup> groups(config_.ulysses_degree);
  for (std::size_t u = 0; u < config_.ulysses_degree; ++u) {
    for (std::size_t r = 0; r < config_.ring_degree; ++r) groups[u].push_back(r * config_.ulysses_degree + u);
  }
  return groups;
}

DeviceGroup Mesh::all_devices() const {
  DeviceGroup g(config_.devices);
  for (std::size_t d = 0; d < g.size(); ++d) g[d] = d;
  return g;
}

LedgerReport ledger_report(const Mesh& mesh) { return LedgerReport{mesh.comm(), mesh.memory()}; }

std::size_t ShardedActivation::total_elements() const {
  std::size_t n = 0;
  for (const auto& s : shards) n += s.size();
  return n;
}

Tensor ShardedActivation::gather() const {
  if (shards.empty()) throw ShapeError("gather of an empty activation");
  if (axis == ShardAxis::sequence) return concat(shards, 0);
  std::vector<Tensor> blocks;
  for (const auto& g : groups) {
    std::vector<Tensor> members;
    for (auto d : g) members.push_back(shards.at(d));
    blocks.push_back(concat(members, 1));
  }
  return concat(blocks, 0);
}

ShardedActivation shard_rows(const Tensor& global, std::size_t devices) {
  if (devices == 0) throw ConfigError("constraint \"C > 0\" violated: C=0");
  const std::size_t s = global.dim(0);
  if (s % devices != 0) {
    throw ConfigError("constraint \"S divisible by C\" violated: S=" + std::to_string(s) +
                      ", C=" + std::to_string(devices));
  }
  ShardedActivation x;
  x.axis = ShardAxis::sequence;
  x.global_shape = global.shape();
  const std::size_t rows = s / devices;
  for (std::size_t d = 0; d < devices; ++d) x.shards.push_back(slice(global, 0, d * rows, rows));
  return x;
}

namespace {

// Groups must be equal-sized runs of consecutive devices, in ascending order,
// covering the mesh.
std::size_t check_groups(std::span<const DeviceGroup> groups, std::size_t devices) {
  if (groups.empty() || groups.front().empty()) throw ConfigError("all-to-all needs a non-empty group");
  const std::size_t n = groups.front().size();
  std::size_t next = 0;
  for (const auto& g : groups) {
    if (g.size() != n) throw ConfigError("all-to-all groups must be equal-sized");
    for (auto d : g) {
      if (d != next++) throw ConfigError("all-to-all groups must be consecutive device runs in order");
    }
  }
  if (next != devices) throw ConfigError("all-to-all groups must cover every device");
  return n;
}

void check_equal_shards(const ShardedActivation& x) {
  for (const auto& s : x.shards) {
    if (s.shape() != x.shards.front().shape()) {
      throw ShapeError("shards must be equal-sized: " + shape_to_string(s.shape()) + " vs " +
                       shape_to_string(x.shards.front().shape()));
    }
  }
  if (x.shards.front().rank() != 3) {
    throw ShapeError("all-to-all expects [rows, heads, head_dim] shards, got " +
                     shape_to_string(x.shards.front().shape()));
  }
}

struct ScratchBuffers {
  std::vector<BufferHandle> handles;
};

ScratchBuffers acquire_scratch(Mesh& mesh, std::span<const std::size_t> devices, std::uint64_t bytes,
                               const CollectiveTag& tag, const A2aOptions& options,
                               const std::string& default_label) {
  ScratchBuffers s;
  if (options.scratch == A2aScratch::none) return s;
  const std::string label = options.label.empty() ? default_label : options.label;
  for (auto d : devices) {
    if (options.scratch == A2aScratch::send_and_receive) {
      s.handles.push_back(mesh.alloc_tracked(d, label + "_send", options.category, bytes, tag.phase, tag.stage));
    }
    s.handles.push_back(mesh.alloc_tracked(d, label, options.category, bytes, tag.phase, tag.stage));
  }
  return s;
}

void release_scratch(Mesh& mesh, const ScratchBuffers& s, const CollectiveTag& tag) {
  for (const auto& h : s.handles) mesh.free_tracked(h, tag.phase, tag.stage);
}

void charge_a2a(Mesh& mesh, std::size_t device, std::uint64_t payload, std::size_t n, const CollectiveTag& tag) {
  const std::uint64_t moved = payload / n * (n - 1);
  mesh.comm().record(device, CommEntry{CollectiveKind::all_to_all, tag.tensor, tag.phase, tag.stage, moved, moved});
}

}  // namespace

ShardedActivation all_to_all_seq_to_head(Mesh& mesh, const ShardedActivation& x,
                                         std::span<const DeviceGroup> groups, const CollectiveTag& tag,
                                         const A2aOptions& options) {
  if (x.axis != ShardAxis::sequence) throw ShapeError("seq_to_head expects a sequence-sharded activation");
  if (x.shards.size() != mesh.device_count()) throw ShapeError("activation does not span the mesh");
  check_equal_shards(x);
  const std::size_t n = check_groups(groups, mesh.device_count());
  const Shape& local = x.shards.front().shape();
  const std::size_t heads = local[1];
  if (heads % n != 0) {
    throw ConfigError("constraint \"heads divisible by group size\" violated: heads=" + std::to_string(heads) +
                      ", group=" + std::to_string(n));
  }

  ShardedActivation y;
  y.axis = ShardAxis::head;
  y.global_shape = x.global_shape;
  y.groups.assign(groups.begin(), groups.end());
  if (n == 1) {
    y.shards = x.shards;
    return y;
  }

  const std::uint64_t payload = mesh.bytes_of(x.shards.front().size());
  const auto devices = mesh.all_devices();
  const auto scratch = acquire_scratch(mesh, devices, payload, tag, options, "a2a_buf");

  const std::size_t per = heads / n;
  y.shards.resize(x.shards.size());
  for (const auto& g : groups) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<Tensor> pieces;
      for (std::size_t j = 0; j < n; ++j) pieces.push_back(slice(x.shards[g[j]], 1, i * per, per));
      y.shards[g[i]] = concat(pieces, 0);
    }
  }
  for (auto d : devices) charge_a2a(mesh, d, payload, n, tag);
  release_scratch(mesh, scratch, tag);
  return y;
}

ShardedActivation all_to_all_head_to_seq(Mesh& mesh, const ShardedActivation& x, const CollectiveTag& tag,
                                         const A2aOptions& options) {
  if (x.axis != ShardAxis::head) throw ShapeError("head_to_seq expects a head-sharded activation");
  if (x.shards.size() != mesh.device_count()) throw ShapeError("activation does not span the mesh");
  check_equal_shards(x);
  const std::size_t n = check_groups(x.groups, mesh.device_count());
  const std::size_t rows = x.shards.front().dim(0);
  if (rows % n != 0) throw ShapeError("group sequence block not divisible by group size");

  ShardedActivation y;
  y.axis = ShardAxis::sequence;
  y.global_shape = x.global_shape;
  if (n == 1) {
    y.shards = x.shards;
    return y;
  }

  const std::uint64_t payload = mesh.bytes_of(x.shards.front().size());
  const auto devices = mesh.all_devices();
  const auto scratch = acquire_scratch(mesh, devices, payload, tag, options, "out_a2a_buf");

  const std::size_t block = rows / n;
  y.shards.resize(x.shards.size());
  for (const auto& g : x.groups) {
    for (std::size_t j = 0; j < n; ++j) {
      std::vector<Tensor> pieces;
      for (std::size_t i = 0; i < n; ++i) pieces.push_back(slice(x.shards[g[i]], 0, j * block, block));
      y.shards[g[j]] = concat(pieces, 1);
    }
  }
  for (auto d : devices) charge_a2a(mesh, d, payload, n, tag);
  release_scratch(mesh, scratch, tag);
  return y;
}

std::vector<Tensor> ring_shift(Mesh& mesh, std::span<const Tensor> by_position, const DeviceGroup& ring,
                               const CollectiveTag& tag) {
  if (ring.empty()) throw ConfigError("ring_shift over an empty group");
  if (by_position.size() != ring.size()) throw ShapeError("ring_shift needs one tensor per ring position");
  for (const auto& t : by_position) {
    if (t.shape() != by_position.front().shape()) throw ShapeError("ring_shift shards must be equal-sized");
  }
  const std::size_t n = ring.size();
  std::vector<Tensor> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = by_position[(i + n - 1) % n];
  if (n == 1) return out;
  const std::uint64_t payload = mesh.bytes_of(by_position.front().size());
  for (auto d : ring) {
    mesh.comm().record(d, CommEntry{CollectiveKind::ring_shift, tag.tensor, tag.phase, tag.stage, payload, payload});
  }
  return out;
}

}  // namespace cpsim
