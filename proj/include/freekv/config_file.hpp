// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value run configuration. Blank lines and '#' comments are ignored;
// unknown keys and malformed values are ConfigError.

#pragma once

#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "freekv/core.hpp"
#include "freekv/latency_sim.hpp"
#include "freekv/tiered_store.hpp"

namespace freekv {

struct RunConfig {
  BudgetConfig budget{512, 64, 64};
  std::size_t page_size = 16;
  std::size_t elem_bytes = 4;
  SpecConfig spec;
  HostLayout host_layout = HostLayout::Hnd;
  bool streamed = true;
  bool overlap = true;
  LinkModel link;
  ComputeModel compute;
  std::optional<std::size_t> n_qo;
  std::optional<std::size_t> n_kv;
  std::optional<std::size_t> head_dim;

  /// Engine configuration for the trace dims; throws InvalidConfig.
  EngineConfig engine_config(std::size_t trace_n_qo, std::size_t trace_n_kv, std::size_t trace_d) const {
    std::vector<std::string> mismatch;
    if (n_qo && *n_qo != trace_n_qo) mismatch.emplace_back("n_qo matches trace");
    if (n_kv && *n_kv != trace_n_kv) mismatch.emplace_back("n_kv matches trace");
    if (head_dim && *head_dim != trace_d) mismatch.emplace_back("d matches trace");
    for (auto& v : model_violations(link, compute)) mismatch.push_back(std::move(v));
    ModelDims dims{trace_n_qo, trace_n_kv, trace_d, page_size, elem_bytes};
    auto violations = config_violations(dims, budget, spec);
    violations.insert(violations.end(), mismatch.begin(), mismatch.end());
    if (!violations.empty()) throw InvalidConfig(std::move(violations));
    return validate_config(dims, budget, spec);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size() || n < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw Error(ErrorCode::ConfigError, key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw Error(ErrorCode::ConfigError, key + ": expected a number, got '" + v + "'");
  }
}

inline bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw Error(ErrorCode::ConfigError, key + ": expected true/false, got '" + v + "'");
}

template <class T>
T require(const std::optional<T>& parsed, const std::string& key, const std::string& v) {
  if (!parsed) throw Error(ErrorCode::ConfigError, key + ": unknown value '" + v + "'");
  return *parsed;
}

}  // namespace detail

inline void apply_config_entry(RunConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  if (key == "budget") c.budget.budget_tokens = parse_count(key, v);
  else if (key == "sink") c.budget.sink_tokens = parse_count(key, v);
  else if (key == "window") c.budget.window_tokens = parse_count(key, v);
  else if (key == "page_size") c.page_size = parse_count(key, v);
  else if (key == "elem_bytes") c.elem_bytes = parse_count(key, v);
  else if (key == "tau") c.spec.tau = parse_real(key, v);
  else if (key == "mode") c.spec.mode = require(parse_spec_mode(v), key, v);
  else if (key == "pooling") c.spec.pooling = require(parse_group_pooling(v), key, v);
  else if (key == "similarity_pooling") c.spec.similarity_pooling = require(parse_similarity_pooling(v), key, v);
  else if (key == "first_layer_exempt") c.spec.first_layer_exempt = parse_flag(key, v);
  else if (key == "host_layout") c.host_layout = require(parse_host_layout(v), key, v);
  else if (key == "streamed") c.streamed = parse_flag(key, v);
  else if (key == "overlap") c.overlap = parse_flag(key, v);
  else if (key == "bandwidth") c.link.bandwidth = parse_real(key, v);
  else if (key == "per_op_latency") c.link.per_op_latency = parse_real(key, v);
  else if (key == "conversion_throughput") c.compute.conversion_throughput = parse_real(key, v);
  else if (key == "attention_time") c.compute.attention_time = parse_real(key, v);
  else if (key == "ffn_time") c.compute.ffn_time = parse_real(key, v);
  else if (key == "qkv_proj_time") c.compute.qkv_proj_time = parse_real(key, v);
  else if (key == "selection_time") c.compute.selection_time = parse_real(key, v);
  else if (key == "n_qo") c.n_qo = parse_count(key, v);
  else if (key == "n_kv") c.n_kv = parse_count(key, v);
  else if (key == "d") c.head_dim = parse_count(key, v);
  else throw Error(ErrorCode::ConfigError, "unknown key '" + key + "'");
}

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::ConfigError, "line " + std::to_string(lineno) + ": expected key=value");
    }
    apply_config_entry(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return c;
}

inline RunConfig read_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

inline std::string format_run_config(const RunConfig& c) {
  std::ostringstream o;
  o << std::setprecision(15);
  o << "budget=" << c.budget.budget_tokens << "\nsink=" << c.budget.sink_tokens << "\nwindow=" << c.budget.window_tokens
    << "\npage_size=" << c.page_size << "\nelem_bytes=" << c.elem_bytes << "\ntau=" << c.spec.tau
    << "\nmode=" << to_string(c.spec.mode) << "\npooling=" << to_string(c.spec.pooling)
    << "\nsimilarity_pooling=" << to_string(c.spec.similarity_pooling)
    << "\nfirst_layer_exempt=" << (c.spec.first_layer_exempt ? "true" : "false")
    << "\nhost_layout=" << to_string(c.host_layout) << "\nstreamed=" << (c.streamed ? "true" : "false")
    << "\noverlap=" << (c.overlap ? "true" : "false") << "\nbandwidth=" << c.link.bandwidth
    << "\nper_op_latency=" << c.link.per_op_latency << "\nconversion_throughput=" << c.compute.conversion_throughput
    << "\nattention_time=" << c.compute.attention_time << "\nffn_time=" << c.compute.ffn_time
    << "\nqkv_proj_time=" << c.compute.qkv_proj_time << "\nselection_time=" << c.compute.selection_time << '\n';
  if (c.n_qo) o << "n_qo=" << *c.n_qo << '\n';
  if (c.n_kv) o << "n_kv=" << *c.n_kv << '\n';
  if (c.head_dim) o << "d=" << *c.head_dim << '\n';
  return o.str();
}

}  // namespace freekv
