// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <random>

#include "freekv/attention.hpp"
#include "freekv/oracle.hpp"
#include "support.hpp"

using namespace freekv;

TEST_CASE("brute top-k trivial cases") {
  const std::vector<double> s{0.3, 0.1, 0.2};
  CHECK(oracle::brute_topk(s, 0).empty());
  CHECK(oracle::brute_topk(s, 3) == std::vector<PageId>{0, 1, 2});
  CHECK(oracle::brute_topk(s, 7, 4) == std::vector<PageId>{4, 5, 6});
  CHECK(oracle::brute_topk(s, 2) == std::vector<PageId>{0, 2});
}

TEST_CASE("masked attention trivial cases") {
  std::mt19937_64 rng(2);
  const auto q = testing::random_floats(rng, 4);
  const auto k = testing::random_floats(rng, 6 * 4);
  const auto v = testing::random_floats(rng, 6 * 4);
  const auto single = oracle::masked_exact_attention(q, k, v, {3});
  for (std::size_t c = 0; c < 4; ++c) CHECK(single[c] == v[3 * 4 + c]);
  const auto all = oracle::masked_exact_attention(q, k, v, {5, 4, 3, 2, 1, 0, 0});
  const auto exact = exact_attention(q, k.data(), v.data(), 6, 4);
  for (std::size_t c = 0; c < 4; ++c) CHECK(all[c] == exact[c]);
  CHECK_THROWS_AS(oracle::masked_exact_attention(q, k, v, {}), Error);
}

TEST_CASE("page bound holds for identical keys with equality") {
  const ModelDims dims{2, 2, 3, 4, 4};
  std::vector<float> k(dims.page_elems());
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t h = 0; h < 2; ++h) {
      for (std::size_t c = 0; c < 3; ++c) k[(t * 2 + h) * 3 + c] = static_cast<float>(h + c) - 1.5f;
    }
  }
  const NhdPage<float> kp(4, 2, 3, k), vp(4, 2, 3);
  const auto summary = summarize_page(kp);
  const std::vector<float> q{0.5f, -2.0f, 1.0f};
  CHECK(oracle::page_bound_audit(q, transpose_to_hnd(kp, vp), 1, summary));
  double dot = 0.0;
  for (std::size_t c = 0; c < 3; ++c) dot += static_cast<double>(q[c]) * kp.at(0, 1, c);
  CHECK(page_score(q, summary, 1) == dot / std::sqrt(3.0));
}

TEST_CASE("page bound detects a summary that is too tight") {
  const NhdPage<float> kp(2, 1, 2, {1, 1, 3, 3}), vp(2, 1, 2);
  auto summary = summarize_page(kp);
  summary.max_key(0)[0] = 2.0f;
  const std::vector<float> q{1.0f, 0.0f};
  CHECK_FALSE(oracle::page_bound_audit(q, transpose_to_hnd(kp, vp), 0, summary));
}

TEST_CASE("page bound holds under adversarial signed channels") {
  std::mt19937_64 rng(31);
  std::bernoulli_distribution sign(0.5);
  for (int trial = 0; trial < 2000; ++trial) {
    const ModelDims dims{2, 2, 16, 8, 4};
    auto k = testing::random_page(rng, dims);
    std::vector<float> data(k.data().begin(), k.data().end());
    for (auto& x : data) x = sign(rng) ? std::abs(x) * 100.0f : -std::abs(x) * 1e-3f;
    const NhdPage<float> kp(8, 2, 16, data);
    auto q = testing::random_floats(rng, 16);
    for (auto& x : q) x = sign(rng) ? x * 50.0f : x;
    REQUIRE(oracle::page_bound_audit(q, transpose_to_hnd(kp, kp), trial % 2, summarize_page(kp)));
  }
}

TEST_CASE("offload count formula") {
  const BudgetConfig b{0, 8, 8};
  CHECK(oracle::offloaded_beyond_sink(8, b, 4) == 0);
  CHECK(oracle::offloaded_beyond_sink(16, b, 4) == 0);
  CHECK(oracle::offloaded_beyond_sink(17, b, 4) == 1);
  CHECK(oracle::offloaded_beyond_sink(20, b, 4) == 1);
  CHECK(oracle::offloaded_beyond_sink(21, b, 4) == 2);
  CHECK(oracle::offloaded_beyond_sink(10, BudgetConfig{0, 0, 0}, 4) == 2);
}

TEST_CASE("synchronous reference with full budget equals full attention") {
  const auto trace = testing::small_trace(4, 2, 4, 2, 8, 60, 5);
  const auto cfg = validate_config({4, 2, 8, 4, 4}, {128, 8, 8}, SpecConfig{});
  for (std::size_t s = 0; s < trace.steps(); ++s) {
    const auto ref = oracle::synchronous_engine_step(trace, cfg, s);
    const auto full = oracle::full_attention_step(trace, s);
    for (std::size_t l = 0; l < trace.layers(); ++l) REQUIRE(ref.layers[l].output == full[l]);
  }
}

TEST_CASE("synchronous reference candidates exclude sink and window") {
  const auto trace = testing::small_trace(5, 1, 2, 1, 8, 40, 3);
  auto spec = SpecConfig{};
  spec.first_layer_exempt = false;
  const auto cfg = validate_config({2, 1, 8, 4, 4}, {24, 8, 8}, spec);
  const auto ref = oracle::synchronous_engine_step(trace, cfg, 0);
  const auto& lr = ref.layers[0];
  CHECK(lr.first_candidate == 2);
  CHECK(lr.end_candidate == 9);
  REQUIRE(lr.selection[0].size() == 2);
  for (auto id : lr.selection[0]) CHECK((id >= 2 && id < 9));
}
