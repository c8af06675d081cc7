// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic traces with a prescribed cosine similarity between each
// head's query at step i and at step i-1. Keys and values are standard normal.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "freekv/core.hpp"
#include "freekv/trace.hpp"

namespace freekv {

/// Target similarity per decode step (and optionally per attention head).
/// Entry j of `steps` applies to step j+1; the last entry extends to every
/// later step. Step 0 has no predecessor and draws fresh queries.
struct SimilaritySchedule {
  std::vector<double> steps{0.95};
  std::map<std::pair<std::size_t, std::size_t>, double> overrides;  ///< (step, head) -> target

  double target(std::size_t step, std::size_t head) const {
    if (auto it = overrides.find({step, head}); it != overrides.end()) return it->second;
    if (steps.empty() || step == 0) return 0.0;
    return steps[std::min(step - 1, steps.size() - 1)];
  }

  static SimilaritySchedule constant(double c) { return SimilaritySchedule{{c}, {}}; }
};

inline void validate_schedule(const SimilaritySchedule& s) {
  if (s.steps.empty()) throw Error(ErrorCode::InvalidSchedule, "schedule has no entries");
  auto check = [](double c) {
    if (!std::isfinite(c) || c < -1.0 || c > 1.0) {
      throw Error(ErrorCode::InvalidSchedule, "similarity target outside [-1, 1]");
    }
  };
  for (double c : s.steps) check(c);
  for (const auto& [key, c] : s.overrides) check(c);
}

/// Parses "0.95*10,0.5,0.95": comma-separated targets, each optionally
/// repeated with *count.
inline SimilaritySchedule parse_schedule(const std::string& text) {
  SimilaritySchedule s;
  s.steps.clear();
  if (!text.empty() && text.back() == ',') throw Error(ErrorCode::InvalidSchedule, "empty schedule entry");
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw Error(ErrorCode::InvalidSchedule, "empty schedule entry");
    std::size_t count = 1;
    std::string value = item;
    if (auto star = item.find('*'); star != std::string::npos) {
      value = item.substr(0, star);
      try {
        std::size_t used = 0;
        const long n = std::stol(item.substr(star + 1), &used);
        if (n <= 0 || used != item.size() - star - 1) throw std::invalid_argument("count");
        count = static_cast<std::size_t>(n);
      } catch (const std::exception&) {
        throw Error(ErrorCode::InvalidSchedule, "bad repeat count in '" + item + "'");
      }
    }
    double c = 0.0;
    try {
      std::size_t used = 0;
      c = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidSchedule, "bad similarity '" + value + "'");
    }
    s.steps.insert(s.steps.end(), count, c);
  }
  validate_schedule(s);
  return s;
}

struct GeneratorDims {
  std::size_t n_layers = 2;
  std::size_t n_qo = 8;
  std::size_t n_kv = 2;
  std::size_t head_dim = 32;
};

struct GeneratorOptions {
  std::uint64_t seed = 1;
  GeneratorDims dims;
  std::size_t prefill_len = 512;
  std::size_t steps = 64;
  SimilaritySchedule schedule;
  double query_scale = 2.0;  ///< query norm is query_scale * sqrt(d)
  bool half = false;         ///< store binary16
};

struct GeneratedTrace {
  Trace trace;
  /// Achieved cosine per (step, layer, head), measured on stored values;
  /// step 0 entries are 0.
  std::vector<double> achieved;
  double max_deviation = 0.0;  ///< worst |achieved - target| over steps >= 1

  double cosine(std::size_t step, std::size_t layer, std::size_t head) const {
    const auto& h = trace.header();
    return achieved[(step * h.n_layers + layer) * h.n_qo + head];
  }
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline std::vector<double> unit_gaussian(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    std::vector<double> v(d);
    for (auto& x : v) x = n(rng);
    const double norm = std::sqrt(dot(v, v));
    if (norm > 1e-12) {
      for (auto& x : v) x /= norm;
      return v;
    }
  }
}

/// Unit vector at cosine c to unit vector u.
inline std::vector<double> rotate_towards(const std::vector<double>& u, double c, std::mt19937_64& rng) {
  if (c >= 1.0) return u;
  if (c <= -1.0) {
    auto out = u;
    for (auto& x : out) x = -x;
    return out;
  }
  std::vector<double> w;
  for (;;) {
    w = unit_gaussian(rng, u.size());
    const double proj = dot(w, u);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= proj * u[i];
    const double norm = std::sqrt(dot(w, w));
    if (norm > 1e-6) {
      for (auto& x : w) x /= norm;
      break;
    }
  }
  const double s = std::sqrt(1.0 - c * c);
  std::vector<double> out(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = c * u[i] + s * w[i];
  return out;
}

inline float store(double x, bool half) {
  const float f = static_cast<float>(x);
  return half ? half_to_float(float_to_half(f)) : f;
}

inline double cosine_of(std::span<const float> a, std::span<const float> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace detail

inline GeneratedTrace generate_synthetic_trace(const GeneratorOptions& opt) {
  validate_schedule(opt.schedule);
  const auto& gd = opt.dims;
  if (gd.n_layers == 0 || gd.n_qo == 0 || gd.n_kv == 0 || gd.head_dim == 0 || gd.n_qo % gd.n_kv != 0) {
    throw Error(ErrorCode::InvalidConfig, "generator dims must be positive with n_qo divisible by n_kv");
  }
  TraceHeader h;
  h.n_layers = static_cast<std::uint32_t>(gd.n_layers);
  h.n_qo = static_cast<std::uint32_t>(gd.n_qo);
  h.n_kv = static_cast<std::uint32_t>(gd.n_kv);
  h.head_dim = static_cast<std::uint32_t>(gd.head_dim);
  h.elem_kind = opt.half ? ElemKind::F16 : ElemKind::F32;
  h.prefill_len = static_cast<std::uint32_t>(opt.prefill_len);
  h.n_steps = static_cast<std::uint32_t>(opt.steps);

  GeneratedTrace out{Trace(h), {}, 0.0};
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](std::span<float> dst) {
    for (auto& x : dst) x = detail::store(normal(rng), opt.half);
  };

  for (std::size_t l = 0; l < gd.n_layers; ++l) {
    fill(out.trace.prefill_keys(l));
    fill(out.trace.prefill_values(l));
  }

  const std::size_t d = gd.head_dim;
  const double norm = opt.query_scale * std::sqrt(static_cast<double>(d));
  std::vector<std::vector<double>> dir(gd.n_layers * gd.n_qo);
  out.achieved.assign(opt.steps * gd.n_layers * gd.n_qo, 0.0);

  for (std::size_t s = 0; s < opt.steps; ++s) {
    for (std::size_t l = 0; l < gd.n_layers; ++l) {
      auto q = out.trace.query(s, l);
      for (std::size_t head = 0; head < gd.n_qo; ++head) {
        auto& u = dir[l * gd.n_qo + head];
        if (s == 0) {
          u = detail::unit_gaussian(rng, d);
        } else {
          u = detail::rotate_towards(u, opt.schedule.target(s, head), rng);
        }
        for (std::size_t c = 0; c < d; ++c) q[head * d + c] = detail::store(u[c] * norm, opt.half);
      }
      fill(out.trace.key(s, l));
      fill(out.trace.value(s, l));
    }
  }

  for (std::size_t s = 1; s < opt.steps; ++s) {
    for (std::size_t l = 0; l < gd.n_layers; ++l) {
      for (std::size_t head = 0; head < gd.n_qo; ++head) {
        const double c = detail::cosine_of(out.trace.query(s, l).subspan(head * d, d),
                                           out.trace.query(s - 1, l).subspan(head * d, d));
        out.achieved[(s * gd.n_layers + l) * gd.n_qo + head] = c;
        out.max_deviation = std::max(out.max_deviation, std::abs(c - opt.schedule.target(s, head)));
      }
    }
  }
  return out;
}

}  // namespace freekv
