// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "freekv/config_file.hpp"
#include "freekv/core.hpp"
#include "freekv/generator.hpp"
#include "freekv/layout.hpp"
#include "freekv/trace.hpp"

namespace freekv::testing {

inline std::vector<float> random_floats(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<float> out(n);
  for (auto& x : out) x = static_cast<float>(dist(rng));
  return out;
}

inline NhdPage<float> random_page(std::mt19937_64& rng, const ModelDims& dims) {
  return NhdPage<float>(dims.page_size, dims.n_kv, dims.head_dim, random_floats(rng, dims.page_elems()));
}

inline EngineConfig small_config(std::size_t n_qo = 4, std::size_t n_kv = 2, std::size_t d = 8, std::size_t p = 4,
                                 std::size_t budget = 48, std::size_t sink = 8, std::size_t window = 8) {
  return validate_config({n_qo, n_kv, d, p, 4}, {budget, sink, window}, SpecConfig{});
}

inline Trace small_trace(std::uint64_t seed, std::size_t n_layers, std::size_t n_qo, std::size_t n_kv, std::size_t d,
                         std::size_t prefill, std::size_t steps, const std::string& schedule = "0.9") {
  GeneratorOptions opt;
  opt.seed = seed;
  opt.dims = {n_layers, n_qo, n_kv, d};
  opt.prefill_len = prefill;
  opt.steps = steps;
  opt.schedule = parse_schedule(schedule);
  return generate_synthetic_trace(opt).trace;
}

/// Run configuration used by the equivalence suites: p=16, S=W=64, B=512.
inline RunConfig suite_config(SpecMode mode, bool first_layer_exempt = false) {
  RunConfig rc;
  rc.budget = {512, 64, 64};
  rc.page_size = 16;
  rc.spec.mode = mode;
  rc.spec.first_layer_exempt = first_layer_exempt;
  return rc;
}

struct SuiteTrace {
  std::uint64_t seed;
  GeneratorDims dims;
  std::size_t prefill;
};

/// Twenty seeded shapes: n_kv in {1,2,4}, G in {1,2,4}, contexts up to 2048.
inline std::vector<SuiteTrace> suite_shapes() {
  const std::size_t kv[] = {1, 2, 4};
  const std::size_t groups[] = {1, 2, 4};
  std::vector<SuiteTrace> out;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const std::size_t n_kv = kv[i % 3];
    const std::size_t g = groups[(i / 3) % 3];
    const std::size_t prefill = 200 + (i * 97) % 1785;
    out.push_back({1000 + i, {2, n_kv * g, n_kv, 32}, prefill});
  }
  return out;
}

inline Trace suite_trace(const SuiteTrace& s, std::size_t steps = 64) {
  GeneratorOptions opt;
  opt.seed = s.seed;
  opt.dims = s.dims;
  opt.prefill_len = s.prefill;
  opt.steps = steps;
  opt.schedule = parse_schedule("0.9*8,0.6,0.95*20,0.7,0.9");
  return generate_synthetic_trace(opt).trace;
}

}  // namespace freekv::testing
