// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <sstream>

#include "cpsim/error.h"
#include "cpsim/report.h"

namespace cpsim {

using json = nlohmann::ordered_json;

namespace {

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> optional_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

Phase phase_from(const json& j) {
  const auto p = parse_phase(j.get<std::string>());
  if (!p) throw ConfigError("unknown phase \"" + j.get<std::string>() + "\"");
  return *p;
}

json indices(const std::vector<std::size_t>& v) { return json(v); }

std::string list_text(const std::vector<std::size_t>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s + "]";
}

HeadSchedule schedule_from_json(const json& j) {
  HeadSchedule s;
  s.q_heads = j.at("q_heads").get<std::size_t>();
  s.kv_heads = j.at("kv_heads").get<std::size_t>();
  s.heads_per_stage = j.at("heads_per_stage").get<std::size_t>();
  s.super_stage_length = j.at("super_stage_length").get<std::size_t>();
  s.grouped = j.at("grouped").get<bool>();
  s.naive_fallback = j.at("naive_fallback").get<bool>();
  for (const auto& st : j.at("stages")) {
    s.stages.push_back(StageHeads{st.at("q").get<std::vector<std::size_t>>(),
                                  st.at("kv").get<std::vector<std::size_t>>()});
  }
  for (const auto& p : j.at("placement")) {
    s.placement.push_back(HeadSlot{p.at("stage").get<std::size_t>(), p.at("slot").get<std::size_t>()});
  }
  return s;
}

}  // namespace

json schedule_to_json(const HeadSchedule& s) {
  json j;
  j["q_heads"] = s.q_heads;
  j["kv_heads"] = s.kv_heads;
  j["heads_per_stage"] = s.heads_per_stage;
  j["super_stage_length"] = s.super_stage_length;
  j["grouped"] = s.grouped;
  j["naive_fallback"] = s.naive_fallback;
  j["stages"] = json::array();
  for (const auto& st : s.stages) j["stages"].push_back({{"q", indices(st.q_heads)}, {"kv", indices(st.kv_heads_to_send)}});
  j["placement"] = json::array();
  for (const auto& p : s.placement) j["placement"].push_back({{"stage", p.stage}, {"slot", p.slot}});
  return j;
}

json report_to_json(const RunReport& r) {
  json j;
  j["schema"] = r.schema;
  j["config"] = config_to_json(r.config);
  j["max_abs_diff"] = r.max_abs_diff;
  j["grad_max_abs_diff"] = optional_json(r.grad_max_abs_diff);
  j["forward_pass"] = r.forward_pass;
  j["backward_pass"] = optional_json(r.backward_pass);
  j["passed"] = r.passed;

  if (r.analytical) {
    const auto& a = *r.analytical;
    j["analytical"] = {{"method", method_name(a.method)},
                       {"params",
                        {{"seq_len", a.params.seq_len},
                         {"devices", a.params.devices},
                         {"layers", a.params.layers},
                         {"ratio", a.params.ratio},
                         {"nu", optional_json(a.params.nu)},
                         {"pi", optional_json(a.params.pi)}}},
                       {"forward_units", a.forward_units},
                       {"forward_bytes", a.forward_bytes},
                       {"measured_match", optional_json(a.measured_match)}};
  } else {
    j["analytical"] = nullptr;
  }

  if (r.schedule) {
    const auto& s = *r.schedule;
    j["schedule"] = {{"schedule", schedule_to_json(s.schedule)},
                     {"naive_volume", s.naive_volume},
                     {"scheduled_volume", optional_json(s.scheduled_volume)},
                     {"measured_head_transfers", s.measured_head_transfers}};
  } else {
    j["schedule"] = nullptr;
  }

  j["comm"] = json::array();
  for (const auto& d : r.comm) {
    json entries = json::array();
    for (const auto& e : d.entries) {
      entries.push_back({{"kind", collective_name(e.kind)},
                         {"tensor", e.tensor},
                         {"phase", phase_name(e.phase)},
                         {"stage", e.stage},
                         {"bytes_sent", e.bytes_sent},
                         {"bytes_received", e.bytes_received}});
    }
    j["comm"].push_back({{"device", d.device},
                         {"bytes_sent", d.bytes_sent},
                         {"bytes_received", d.bytes_received},
                         {"entries", std::move(entries)}});
  }

  j["memory"] = json::array();
  for (const auto& d : r.memory) {
    json phases = json::array();
    for (const auto& p : d.phases) {
      phases.push_back({{"phase", phase_name(p.phase)},
                        {"peak_total", p.peak_total},
                        {"peak_intermediate", p.peak_intermediate}});
    }
    j["memory"].push_back({{"device", d.device},
                           {"peak_total", d.peak_total},
                           {"peak_intermediate", d.peak_intermediate},
                           {"phases", std::move(phases)}});
  }
  return j;
}

RunReport report_from_json(const json& j) {
  RunReport r;
  try {
    r.schema = j.at("schema").get<std::string>();
    if (r.schema != kReportSchema) throw ConfigError("unsupported report schema \"" + r.schema + "\"");
    r.config = parse_config(j.at("config"));
    r.max_abs_diff = j.at("max_abs_diff").get<double>();
    r.grad_max_abs_diff = optional_from<double>(j, "grad_max_abs_diff");
    r.forward_pass = j.at("forward_pass").get<bool>();
    r.backward_pass = optional_from<bool>(j, "backward_pass");
    r.passed = j.at("passed").get<bool>();

    if (!j.at("analytical").is_null()) {
      const auto& a = j.at("analytical");
      AnalyticalSummary s;
      s.method = parse_memory_method(a.at("method").get<std::string>());
      const auto& p = a.at("params");
      s.params.seq_len = p.at("seq_len").get<std::size_t>();
      s.params.devices = p.at("devices").get<std::size_t>();
      s.params.layers = p.at("layers").get<std::size_t>();
      s.params.ratio = p.at("ratio").get<std::size_t>();
      s.params.nu = optional_from<std::size_t>(p, "nu");
      s.params.pi = optional_from<std::size_t>(p, "pi");
      s.forward_units = a.at("forward_units").get<std::vector<double>>();
      s.forward_bytes = a.at("forward_bytes").get<std::vector<double>>();
      s.measured_match = optional_from<bool>(a, "measured_match");
      r.analytical = std::move(s);
    }

    if (!j.at("schedule").is_null()) {
      const auto& s = j.at("schedule");
      ScheduleSummary out;
      out.schedule = schedule_from_json(s.at("schedule"));
      out.naive_volume = s.at("naive_volume").get<std::uint64_t>();
      out.scheduled_volume = optional_from<std::uint64_t>(s, "scheduled_volume");
      out.measured_head_transfers = s.at("measured_head_transfers").get<std::vector<std::uint64_t>>();
      r.schedule = std::move(out);
    }

    for (const auto& d : j.at("comm")) {
      DeviceCommSummary c;
      c.device = d.at("device").get<std::size_t>();
      c.bytes_sent = d.at("bytes_sent").get<std::uint64_t>();
      c.bytes_received = d.at("bytes_received").get<std::uint64_t>();
      for (const auto& e : d.at("entries")) {
        const auto kind = e.at("kind").get<std::string>();
        c.entries.push_back(CommEntry{kind == "ring_shift" ? CollectiveKind::ring_shift : CollectiveKind::all_to_all,
                                      e.at("tensor").get<std::string>(), phase_from(e.at("phase")),
                                      e.at("stage").get<int>(), e.at("bytes_sent").get<std::uint64_t>(),
                                      e.at("bytes_received").get<std::uint64_t>()});
      }
      r.comm.push_back(std::move(c));
    }

    for (const auto& d : j.at("memory")) {
      DeviceMemorySummary m;
      m.device = d.at("device").get<std::size_t>();
      m.peak_total = d.at("peak_total").get<std::uint64_t>();
      m.peak_intermediate = d.at("peak_intermediate").get<std::uint64_t>();
      for (const auto& p : d.at("phases")) {
        m.phases.push_back(PhasePeak{phase_from(p.at("phase")), p.at("peak_total").get<std::uint64_t>(),
                                     p.at("peak_intermediate").get<std::uint64_t>()});
      }
      r.memory.push_back(std::move(m));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed report: ") + e.what());
  }
  return r;
}

std::string report_to_json_text(const RunReport& report) { return report_to_json(report).dump(2) + "\n"; }

std::string report_to_csv(const RunReport& r) {
  std::ostringstream out;
  out << "schema,method,device,phase,peak_total_bytes,peak_intermediate_bytes\n";
  for (const auto& d : r.memory) {
    for (const auto& p : d.phases) {
      out << kLedgerCsvSchema << ',' << method_name(r.config.method) << ',' << d.device << ','
          << phase_name(p.phase) << ',' << p.peak_total << ',' << p.peak_intermediate << '\n';
    }
  }
  return out.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write \"" + path + "\"");
  out << text;
  out.flush();
  if (!out) throw IoError("write to \"" + path + "\" failed");
}

json schedule_dump_json(std::size_t q_heads, std::size_t kv_heads, std::size_t devices) {
  const auto s = build_gqa_schedule(q_heads, kv_heads, devices, devices);
  json j;
  j["schedule"] = schedule_to_json(s);
  j["naive_volume"] = gqa_comm_volume(q_heads, kv_heads, devices, false);
  j["scheduled_volume"] =
      kv_heads % devices == 0 ? json(gqa_comm_volume(q_heads, kv_heads, devices, true)) : json(nullptr);
  return j;
}

std::string schedule_dump_text(std::size_t q_heads, std::size_t kv_heads, std::size_t devices) {
  const auto s = build_gqa_schedule(q_heads, kv_heads, devices, devices);
  std::ostringstream out;
  out << "H_q=" << q_heads << " H_kv=" << kv_heads << " C=" << devices << " U=" << devices << ": "
      << s.stage_count() << " stages, super-stage length " << s.super_stage_length
      << (s.grouped ? ", grouped" : ", sequential") << '\n';
  if (s.naive_fallback) out << "naive_fallback: H_kv not divisible by C, key/values re-sent every stage\n";
  for (std::size_t i = 0; i < s.stage_count(); ++i) {
    const auto& st = s.stages[i];
    out << "stage " << i << ": q=" << list_text(st.q_heads) << " kv=";
    out << (st.kv_heads_to_send.empty() ? "resident " + list_text(s.resident_kv(i)) : list_text(st.kv_heads_to_send))
        << '\n';
  }
  out << "naive volume: " << gqa_comm_volume(q_heads, kv_heads, devices, false) << '\n';
  if (kv_heads % devices == 0) {
    out << "scheduled volume: " << gqa_comm_volume(q_heads, kv_heads, devices, true) << '\n';
  } else {
    out << "scheduled volume: n/a\n";
  }
  return out.str();
}

}  // namespace cpsim
