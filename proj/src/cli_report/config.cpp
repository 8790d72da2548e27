// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <set>
#include <sstream>

#include "cpsim/error.h"
#include "cpsim/report.h"
#include "cpsim/rng.h"

namespace cpsim {

using json = nlohmann::ordered_json;

std::string_view method_name(Method m) {
  switch (m) {
    case Method::oracle: return "oracle";
    case Method::ulysses: return "ulysses";
    case Method::ring: return "ring";
    case Method::upipe: return "upipe";
    case Method::hybrid: return "hybrid";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (auto m : {Method::oracle, Method::ulysses, Method::ring, Method::upipe, Method::hybrid}) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown method \"" + std::string(name) + "\"; expected oracle, ulysses, ring, upipe or hybrid");
}

void validate_experiment(const ExperimentConfig& c) {
  c.mesh.validate();
  c.model.validate(c.mesh.devices);
  const std::size_t devices = c.mesh.devices;
  if (c.backward && (c.method == Method::ring || c.method == Method::hybrid)) {
    throw ConfigError("method " + std::string(method_name(c.method)) + " has no backward pass");
  }
  switch (c.method) {
    case Method::oracle:
    case Method::ring:
      break;
    case Method::ulysses:
      if (c.model.q_heads % devices != 0) {
        throw ConfigError("constraint \"H_q divisible by C\" violated: H_q=" + std::to_string(c.model.q_heads) +
                          ", C=" + std::to_string(devices));
      }
      break;
    case Method::hybrid:
      if (c.model.q_heads % c.mesh.ulysses_degree != 0) {
        throw ConfigError("constraint \"H_q divisible by ulysses_degree\" violated: H_q=" +
                          std::to_string(c.model.q_heads) + ", ulysses_degree=" +
                          std::to_string(c.mesh.ulysses_degree));
      }
      break;
    case Method::upipe:
      UPipeConfig{c.upipe_heads_per_stage}.validate(c.model, devices);
      break;
  }
}

namespace {

void reject_unknown(const json& j, std::string_view where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("unknown key \"" + key + "\" in " + std::string(where));
    }
  }
}

std::uint64_t get_uint(const json& j, const std::string& key, std::uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    throw ConfigError("\"" + key + "\" must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

bool get_bool(const json& j, const std::string& key, bool fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_boolean()) throw ConfigError("\"" + key + "\" must be a boolean");
  return j.at(key).get<bool>();
}

std::string get_string(const json& j, const std::string& key, const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_string()) throw ConfigError("\"" + key + "\" must be a string");
  return j.at(key).get<std::string>();
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  reject_unknown(j, "config",
                 {"model", "mesh", "method", "upipe_heads_per_stage", "seed", "causal", "backward", "output"});
  if (!j.contains("model") || !j.contains("mesh")) throw ConfigError("config needs \"model\" and \"mesh\" objects");
  ExperimentConfig c;
  const auto& m = j.at("model");
  reject_unknown(m, "model", {"seq_len", "q_heads", "kv_heads", "head_dim", "ffn_dim", "vocab_size", "layers"});
  c.model.seq_len = get_uint(m, "seq_len", 0);
  c.model.q_heads = get_uint(m, "q_heads", 0);
  c.model.kv_heads = get_uint(m, "kv_heads", c.model.q_heads);
  c.model.head_dim = get_uint(m, "head_dim", 0);
  c.model.ffn_dim = get_uint(m, "ffn_dim", 0);
  c.model.vocab_size = get_uint(m, "vocab_size", 0);
  c.model.layers = get_uint(m, "layers", 1);

  const auto& me = j.at("mesh");
  reject_unknown(me, "mesh", {"devices", "ulysses_degree", "ring_degree", "bytes_per_element"});
  c.mesh.devices = get_uint(me, "devices", 1);
  c.mesh.ring_degree = get_uint(me, "ring_degree", 1);
  const std::size_t fallback_a = c.mesh.ring_degree == 0 ? 0 : c.mesh.devices / c.mesh.ring_degree;
  c.mesh.ulysses_degree = get_uint(me, "ulysses_degree", fallback_a);
  c.mesh.bytes_per_element = get_uint(me, "bytes_per_element", 2);

  c.method = parse_method(get_string(j, "method", "ulysses"));
  c.upipe_heads_per_stage = get_uint(j, "upipe_heads_per_stage", 0);
  c.seed = get_uint(j, "seed", 0);
  c.causal = get_bool(j, "causal", true);
  c.backward = get_bool(j, "backward", false);
  c.output = get_string(j, "output", "");
  validate_experiment(c);
  return c;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file \"" + path + "\"");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file \"" + path + "\" is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["model"] = {{"seq_len", c.model.seq_len},   {"q_heads", c.model.q_heads},       {"kv_heads", c.model.kv_heads},
                {"head_dim", c.model.head_dim}, {"ffn_dim", c.model.ffn_dim},       {"vocab_size", c.model.vocab_size},
                {"layers", c.model.layers}};
  j["mesh"] = {{"devices", c.mesh.devices},
               {"ulysses_degree", c.mesh.ulysses_degree},
               {"ring_degree", c.mesh.ring_degree},
               {"bytes_per_element", c.mesh.bytes_per_element}};
  j["method"] = method_name(c.method);
  j["upipe_heads_per_stage"] = c.upipe_heads_per_stage;
  j["seed"] = c.seed;
  j["causal"] = c.causal;
  j["backward"] = c.backward;
  j["output"] = c.output;
  return j;
}

GeneratedData generate_data(const ModelConfig& model, std::uint64_t seed) {
  Rng rng(seed);
  GeneratedData g;
  g.q = rng.uniform({model.seq_len, model.q_heads, model.head_dim});
  g.k = rng.uniform({model.seq_len, model.kv_heads, model.head_dim});
  g.v = rng.uniform({model.seq_len, model.kv_heads, model.head_dim});
  g.cotangent = rng.uniform({model.seq_len, model.q_heads, model.head_dim});
  return g;
}

}  // namespace cpsim
