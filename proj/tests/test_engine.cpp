// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <algorithm>

#include "freekv/engine.hpp"
#include "freekv/report.hpp"
#include "support.hpp"

using namespace freekv;

namespace {

GeneratedTrace engine_trace(std::uint64_t seed, std::size_t n_qo, std::size_t n_kv, const std::string& schedule,
                            std::size_t prefill = 700, std::size_t steps = 16) {
  GeneratorOptions opt;
  opt.seed = seed;
  opt.dims = {2, n_qo, n_kv, 32};
  opt.prefill_len = prefill;
  opt.steps = steps;
  opt.schedule = parse_schedule(schedule);
  return generate_synthetic_trace(opt);
}

std::vector<PageId> as_vec(std::span<const PageId> s) { return {s.begin(), s.end()}; }

std::size_t total_ops(const MetricsReport& m) { return m.sync_transfer.copy_op_count + m.background_transfer.copy_op_count; }

}  // namespace

TEST_CASE("runs are deterministic") {
  const auto g = engine_trace(1, 4, 2, "0.9*4,0.5,0.9");
  const auto rc = testing::suite_config(SpecMode::Speculative);
  const auto a = run_engine(g.trace, rc);
  const auto b = run_engine(g.trace, rc);
  CHECK(to_json(a.metrics).dump() == to_json(b.metrics).dump());
  CHECK(a.timeline.events().size() == b.timeline.events().size());
  CHECK(a.metrics.invariant_violations.empty());
}

TEST_CASE("always-correct mode reproduces the synchronous reference") {
  const auto g = engine_trace(2, 8, 2, "0.3");
  const auto r = run_engine(g.trace, testing::suite_config(SpecMode::AlwaysCorrect));
  CHECK(r.metrics.max_abs_error_vs_oracle == 0.0);
  CHECK(r.metrics.selection_jaccard == 1.0);
  CHECK(r.metrics.correction_rate == 1.0);
  CHECK(r.metrics.invariant_violations.empty());
}

TEST_CASE("never-correct mode attends over the previous step's selection") {
  const auto g = engine_trace(3, 4, 4, "0.5");
  const auto r = run_engine(g.trace, testing::suite_config(SpecMode::NeverCorrect));
  CHECK(r.metrics.correction_rate == 0.0);
  for (std::size_t s = 1; s < r.transcript.size(); ++s) {
    for (std::size_t l = 0; l < 2; ++l) {
      const auto& now = r.transcript[s].layers[l];
      const auto& before = r.transcript[s - 1].layers[l];
      for (std::size_t h = 0; h < 4; ++h) REQUIRE(as_vec(now.used.pages(h)) == as_vec(before.fresh.pages(h)));
      REQUIRE(now.sync_pages == 0);
    }
  }
}

TEST_CASE("tau at the ends reduces to the forced modes") {
  const auto g = engine_trace(4, 4, 2, "0.9,0.2,0.8,0.99");
  auto rc = testing::suite_config(SpecMode::Speculative);
  rc.spec.tau = 0.0;
  const auto lag = run_engine(g.trace, rc);
  rc.spec.tau = 1.0;
  const auto sync = run_engine(g.trace, rc);
  CHECK(lag.metrics.output_digest == run_engine(g.trace, testing::suite_config(SpecMode::NeverCorrect)).metrics.output_digest);
  CHECK(sync.metrics.output_digest ==
        run_engine(g.trace, testing::suite_config(SpecMode::AlwaysCorrect)).metrics.output_digest);
  CHECK(sync.metrics.max_abs_error_vs_oracle == 0.0);
}

TEST_CASE("host layout changes copy counts but not outputs") {
  const auto g = engine_trace(5, 4, 2, "0.9,0.4");
  auto rc = testing::suite_config(SpecMode::Speculative);
  const auto hnd = run_engine(g.trace, rc);
  rc.host_layout = HostLayout::Nhd;
  const auto nhd = run_engine(g.trace, rc);
  CHECK(hnd.metrics.output_digest == nhd.metrics.output_digest);
  REQUIRE(total_ops(hnd.metrics) > 0);
  CHECK(total_ops(nhd.metrics) == 2 * rc.page_size * total_ops(hnd.metrics));
  CHECK(nhd.metrics.simulated_makespan > hnd.metrics.simulated_makespan);
}

TEST_CASE("correction rate matches the generated similarities") {
  GeneratorOptions opt;
  opt.seed = 6;
  opt.dims = {3, 4, 2, 32};
  opt.prefill_len = 600;
  opt.steps = 20;
  opt.schedule = parse_schedule("0.95*5,0.5,0.95*6,0.3,0.95");
  opt.schedule.overrides[{3, 1}] = 0.2;
  opt.schedule.overrides[{9, 2}] = 0.1;
  opt.schedule.overrides[{9, 3}] = 0.1;
  const auto g = generate_synthetic_trace(opt);
  auto rc = testing::suite_config(SpecMode::Speculative, true);
  rc.spec.tau = 0.8;
  const auto r = run_engine(g.trace, rc, {false, false, true, false});

  std::size_t expected = 0;
  for (std::size_t s = 1; s < opt.steps; ++s) {
    for (std::size_t l = 1; l < 3; ++l) {
      for (std::size_t h = 0; h < 2; ++h) {
        const double pooled = (g.cosine(s, l, 2 * h) + g.cosine(s, l, 2 * h + 1)) / 2.0;
        const bool fire = pooled < 0.8;
        expected += fire;
        REQUIRE(static_cast<bool>(r.transcript[s].layers[l].decisions.corrected[h]) == fire);
      }
    }
  }
  CHECK(r.metrics.corrections == expected);
  CHECK(r.metrics.decisions == 19 * 2 * 2);
  CHECK(r.metrics.correction_rate == static_cast<double>(expected) / (19.0 * 4.0));
}

TEST_CASE("the exempt layer attends over the full context") {
  const auto g = engine_trace(7, 4, 2, "0.9", 300, 6);
  const auto r = run_engine(g.trace, testing::suite_config(SpecMode::Speculative, true), {true, true, true, false});
  for (std::size_t s = 0; s < 6; ++s) {
    CHECK(r.transcript[s].layers[0].exempt);
    CHECK_FALSE(r.transcript[s].layers[1].exempt);
    const auto full = oracle::full_attention_step(g.trace, s);
    for (std::size_t i = 0; i < full[0].size(); ++i) {
      REQUIRE(r.transcript[s].outputs[0][i] == Catch::Approx(full[0][i]).margin(1e-6));
    }
  }
  CHECK(r.metrics.decisions == 5 * 2);
  CHECK(r.timeline.events().empty());
}

TEST_CASE("overlap hides background recall in the simulated clock") {
  const auto g = engine_trace(8, 4, 2, "0.95");
  auto rc = testing::suite_config(SpecMode::NeverCorrect);
  const auto with = run_engine(g.trace, rc);
  rc.overlap = false;
  const auto without = run_engine(g.trace, rc);
  CHECK(with.metrics.exposed_recall_time <= without.metrics.exposed_recall_time);
  CHECK(with.metrics.simulated_makespan < without.metrics.simulated_makespan);
  CHECK(with.timeline.lanes_disjoint());
}

TEST_CASE("mode comparison shares one trace") {
  const auto g = engine_trace(9, 8, 2, "0.9,0.6");
  auto a = testing::suite_config(SpecMode::Speculative);
  auto b = a;
  b.spec.pooling = GroupPooling::MaxS;
  const auto report = compare_modes(g.trace, {{"means", a}, {"maxs", b}});
  REQUIRE(report.runs.size() == 2);
  CHECK(report.runs[0].second.metrics.trace_hash == report.trace_hash);
  CHECK(report.runs[1].second.metrics.trace_hash == report.trace_hash);
  CHECK(report.runs[1].second.metrics.pooling == "MaxS");
  CHECK_THROWS_AS(compare_modes(g.trace, {{"only", a}}), Error);
  const auto j = to_json(report);
  CHECK(j["runs"].size() == 2);
}

TEST_CASE("configs that do not fit the trace are rejected") {
  const auto g = engine_trace(10, 4, 2, "0.9", 100, 2);
  auto rc = testing::suite_config(SpecMode::Speculative);
  rc.n_qo = 8;
  CHECK_THROWS_AS(run_engine(g.trace, rc), InvalidConfig);
}
