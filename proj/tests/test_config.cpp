// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include "freekv/config_file.hpp"

using namespace freekv;

namespace {

ErrorCode parse_error(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("parse succeeded");
  return ErrorCode::InvalidConfig;
}

}  // namespace

TEST_CASE("config parsing with comments and whitespace") {
  const auto c = parse_run_config(
      "# run\n"
      "budget = 1024\n"
      "\n"
      "  sink=32  # pinned\n"
      "window=48\n"
      "mode=always_correct\n"
      "pooling=MaxS\n"
      "host_layout=nhd\n"
      "tau=0.65\n"
      "streamed=false\n"
      "bandwidth=1e10\n"
      "d=64\n");
  CHECK(c.budget.budget_tokens == 1024);
  CHECK(c.budget.sink_tokens == 32);
  CHECK(c.budget.window_tokens == 48);
  CHECK(c.spec.mode == SpecMode::AlwaysCorrect);
  CHECK(c.spec.pooling == GroupPooling::MaxS);
  CHECK(c.host_layout == HostLayout::Nhd);
  CHECK(c.spec.tau == 0.65);
  CHECK_FALSE(c.streamed);
  CHECK(c.link.bandwidth == 1e10);
  CHECK(c.head_dim == std::optional<std::size_t>(64));
  CHECK_FALSE(c.n_qo);
}

TEST_CASE("config errors") {
  CHECK(parse_error("warp_factor=9\n") == ErrorCode::ConfigError);
  CHECK(parse_error("budget\n") == ErrorCode::ConfigError);
  CHECK(parse_error("budget=-4\n") == ErrorCode::ConfigError);
  CHECK(parse_error("budget=12x\n") == ErrorCode::ConfigError);
  CHECK(parse_error("tau=high\n") == ErrorCode::ConfigError);
  CHECK(parse_error("mode=sometimes\n") == ErrorCode::ConfigError);
  CHECK(parse_error("streamed=maybe\n") == ErrorCode::ConfigError);
  CHECK_THROWS_AS(read_run_config("/nonexistent/run.cfg"), Error);
}

TEST_CASE("format and parse round trip") {
  RunConfig c;
  c.budget = {2048, 16, 128};
  c.page_size = 32;
  c.spec.tau = 0.123456789;
  c.spec.mode = SpecMode::NeverCorrect;
  c.spec.pooling = GroupPooling::MeanQK;
  c.spec.similarity_pooling = SimilarityPooling::Max;
  c.spec.first_layer_exempt = true;
  c.overlap = false;
  c.link.per_op_latency = 3.5e-6;
  c.compute.ffn_time = 1e-4;
  c.n_kv = 4;
  const auto back = parse_run_config(format_run_config(c));
  CHECK(format_run_config(back) == format_run_config(c));
  CHECK(back.spec.tau == c.spec.tau);
  CHECK(back.n_kv == c.n_kv);
}

TEST_CASE("engine config checks dims against the trace") {
  RunConfig c;
  c.n_kv = 2;
  CHECK(c.engine_config(8, 2, 32).selectable_pages == 24);
  try {
    c.engine_config(8, 4, 32);
    FAIL("expected InvalidConfig");
  } catch (const InvalidConfig& e) {
    CHECK(e.violations() == std::vector<std::string>{"n_kv matches trace"});
  }
  c.n_kv.reset();
  c.budget.budget_tokens = 100;
  CHECK_THROWS_AS(c.engine_config(8, 2, 32), InvalidConfig);
  c.budget.budget_tokens = 512;
  c.link.bandwidth = 0.0;
  CHECK_THROWS_AS(c.engine_config(8, 2, 32), InvalidConfig);
}
