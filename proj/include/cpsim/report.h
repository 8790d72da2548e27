// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration, orchestration, verification grids and report
// serialization.
//
// Random tensors: std::mt19937_64 seeded with the experiment seed; each value
// is 2u - 1 where u is the top 53 bits of one draw scaled to [0, 1). Tensors
// are drawn in the order q [S, H_q, d_head], k [S, H_kv, d_head],
// v [S, H_kv, d_head], then the output cotangent [S, H_q, d_head].

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cpsim/engines.h"
#include "cpsim/mem_model.h"
#include "json.hpp"

namespace cpsim {

inline constexpr std::string_view kReportSchema = "cpsim.run_report/v1";
inline constexpr std::string_view kLedgerCsvSchema = "cpsim.ledger_csv/v1";

enum class Method { oracle, ulysses, ring, upipe, hybrid };

std::string_view method_name(Method m);
Method parse_method(std::string_view name);

struct ExperimentConfig {
  ModelConfig model;
  MeshConfig mesh;
  Method method = Method::ulysses;
  std::size_t upipe_heads_per_stage = 0;
  std::uint64_t seed = 0;
  bool causal = true;
  bool backward = false;
  std::string output;

  bool operator==(const ExperimentConfig&) const = default;
};

// Checks every divisibility constraint for the chosen method; throws
// ConfigError naming the violated constraint.
void validate_experiment(const ExperimentConfig& config);

// Unknown keys and wrongly typed values are ConfigError.
ExperimentConfig parse_config(const nlohmann::ordered_json& j);
// IoError when the file is missing or unreadable.
ExperimentConfig parse_config_file(const std::string& path);
nlohmann::ordered_json config_to_json(const ExperimentConfig& config);

struct GeneratedData {
  Tensor q, k, v, cotangent;
};
GeneratedData generate_data(const ModelConfig& model, std::uint64_t seed);

struct PhasePeak {
  Phase phase = Phase::pre_attn;
  std::uint64_t peak_total = 0;
  std::uint64_t peak_intermediate = 0;

  bool operator==(const PhasePeak&) const = default;
};

struct DeviceMemorySummary {
  std::size_t device = 0;
  std::uint64_t peak_total = 0;
  std::uint64_t peak_intermediate = 0;
  std::vector<PhasePeak> phases;

  bool operator==(const DeviceMemorySummary&) const = default;
};

struct DeviceCommSummary {
  std::size_t device = 0;
  std::uint64_t bytes_sent = 0;
  std::uint64_t bytes_received = 0;
  std::vector<CommEntry> entries;

  bool operator==(const DeviceCommSummary&) const = default;
};

struct AnalyticalSummary {
  MemoryMethod method = MemoryMethod::ulysses;
  MemoryParams params;
  std::vector<double> forward_units;
  std::vector<double> forward_bytes;
  // Measured forward phase peaks equal forward_bytes on every device.
  std::optional<bool> measured_match;

  bool operator==(const AnalyticalSummary&) const = default;
};

struct ScheduleSummary {
  HeadSchedule schedule;
  std::uint64_t naive_volume = 0;
  std::optional<std::uint64_t> scheduled_volume;
  std::vector<std::uint64_t> measured_head_transfers;  // per device

  bool operator==(const ScheduleSummary&) const = default;
};

struct RunReport {
  std::string schema{kReportSchema};
  ExperimentConfig config;
  double max_abs_diff = 0;
  std::optional<double> grad_max_abs_diff;
  std::vector<DeviceCommSummary> comm;
  std::vector<DeviceMemorySummary> memory;
  std::optional<AnalyticalSummary> analytical;
  std::optional<ScheduleSummary> schedule;
  bool forward_pass = false;
  std::optional<bool> backward_pass;
  bool passed = false;

  bool operator==(const RunReport&) const = default;
};

inline constexpr double kForwardTolerance = 1e-9;
inline constexpr double kBackwardTolerance = 1e-9;
inline constexpr double kFiniteDifferenceStep = 1e-5;
inline constexpr double kFiniteDifferenceTolerance = 1e-6;  // relative

RunReport run_experiment(const ExperimentConfig& config);

nlohmann::ordered_json report_to_json(const RunReport& report);
RunReport report_from_json(const nlohmann::ordered_json& j);
std::string report_to_json_text(const RunReport& report);
// One row per (device, phase) memory entry.
std::string report_to_csv(const RunReport& report);
// IoError when the path cannot be written.
void write_text_file(const std::string& path, const std::string& text);

nlohmann::ordered_json schedule_to_json(const HeadSchedule& schedule);
// Human-readable stage listing with both communication volumes.
std::string schedule_dump_text(std::size_t q_heads, std::size_t kv_heads, std::size_t devices);
nlohmann::ordered_json schedule_dump_json(std::size_t q_heads, std::size_t kv_heads, std::size_t devices);

struct VerifyOptions {
  std::uint64_t seed = 5;
  bool inject_merge_fault = false;
};

struct VerifyFailure {
  std::string config;  // case key
  std::string check;
  std::string detail;
};

struct VerifySummary {
  std::string grid;
  std::size_t configs = 0;
  std::size_t checks = 0;
  std::size_t passed = 0;
  std::vector<VerifyFailure> failures;
  std::map<std::string, std::size_t> check_counts;  // evaluations per check name
  double seconds = 0;

  bool ok() const { return failures.empty(); }
};

struct GridPoint {
  std::size_t seq_len, q_heads, kv_heads, head_dim, devices, heads_per_stage;
  bool causal;
  std::string key() const;
};

std::vector<GridPoint> verification_grid(std::string_view name);
VerifySummary verify_suite(std::string_view grid, const VerifyOptions& options = {});

// Events of the UPipe forward whose live intermediate bytes exceed the
// first-stage peak of their super-stage.
std::size_t upipe_flatness_violations(const MemoryLedger& ledger, std::size_t device, const HeadSchedule& schedule);

// A merge that keeps only the partial with the larger log-sum-exp; used to
// check that the suite isolates faulty merging.
AttentionPartial faulty_merge(const AttentionPartial& a, const AttentionPartial& b);

}  // namespace cpsim
