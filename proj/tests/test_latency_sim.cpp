// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "freekv/latency_sim.hpp"

using namespace freekv;
using Catch::Approx;

TEST_CASE("pipeline example: 8 pages, 2 ms copy, 1 ms convert") {
  const auto seq = simulate_recall(8, 2e-3, 1e-3, false);
  const auto str = simulate_recall(8, 2e-3, 1e-3, true);
  CHECK(seq.makespan() == Approx(24e-3).margin(1e-15));
  CHECK(str.makespan() == Approx(17e-3).margin(1e-15));
  CHECK(seq.lanes_disjoint());
  CHECK(str.lanes_disjoint());
  CHECK(streamed_recall_makespan(8, 2e-3, 1e-3) == Approx(17e-3));
}

TEST_CASE("empty and single-page recalls") {
  CHECK(simulate_recall(0, 1.0, 1.0, true).makespan() == 0.0);
  CHECK(simulate_recall(0, 1.0, 1.0, false).events().empty());
  CHECK(simulate_recall(1, 3.0, 2.0, true).makespan() == simulate_recall(1, 3.0, 2.0, false).makespan());
}

TEST_CASE("streamed never exceeds sequential and matches the closed form") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> t(0.0, 5e-3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = static_cast<std::size_t>(trial % 20);
    const double tx = trial % 7 == 0 ? 0.0 : t(rng);
    const double tc = trial % 11 == 0 ? 0.0 : t(rng);
    const double seq = simulate_recall(n, tx, tc, false).makespan();
    const double str = simulate_recall(n, tx, tc, true).makespan();
    REQUIRE(str <= seq + 1e-15);
    REQUIRE(str == Approx(streamed_recall_makespan(n, tx, tc)).margin(1e-15));
    REQUIRE(seq == Approx(sequential_recall_makespan(n, tx, tc)).margin(1e-15));
    if (n >= 2 && tx > 0.0 && tc > 0.0) REQUIRE(str < seq);
  }
}

TEST_CASE("page costs follow the link model") {
  const LinkModel link{1e9, 1e-6};
  ComputeModel compute;
  compute.conversion_throughput = 1e12;
  const auto c = page_cost(1000, 3, link, compute);
  CHECK(c.transfer == Approx(1e-6 + 3e-6));
  CHECK(c.convert == Approx(1e-9));
}

TEST_CASE("fragmented host pages cost 2p copy operations") {
  const ModelDims dims{8, 4, 64, 16, 2};
  const LinkModel link{25e9, 1e-6};
  const ComputeModel compute;
  const auto hnd = recall_page_cost(dims, HostLayout::Hnd, link, compute);
  const auto nhd = recall_page_cost(dims, HostLayout::Nhd, link, compute);
  CHECK(nhd.ops == 2 * dims.page_size * hnd.ops);
  CHECK(nhd.bytes == hnd.bytes);
  CHECK(hnd.ops == contiguous_runs(LayoutKind::HndCombined, dims, 0).size());
  CHECK(nhd.ops == contiguous_runs(LayoutKind::NhdCombined, dims, 0).size());
  for (bool streamed : {false, true}) {
    CHECK(simulate_recall(10, dims, HostLayout::Nhd, link, compute, streamed).makespan() >
          simulate_recall(10, dims, HostLayout::Hnd, link, compute, streamed).makespan());
  }
}

TEST_CASE("recall hidden inside the overlap window") {
  ComputeModel compute;
  DecodeStepLoad load;
  load.selection_on_critical_path = true;
  load.background_pages = 2;
  load.page = {10e-6, 1e-6, 1, 100};
  load.streamed = false;
  const auto r = simulate_decode_step(load, compute, true);
  CHECK(r.exposed == 0.0);
  CHECK(r.step_time == Approx(compute.selection_time + compute.attention_time + compute.ffn_time +
                              compute.qkv_proj_time));
  CHECK(r.timeline.lanes_disjoint());
}

TEST_CASE("recall three milliseconds past the window is exposed by three milliseconds") {
  ComputeModel compute;
  compute.attention_time = 1e-3;
  compute.ffn_time = 2e-3;
  compute.qkv_proj_time = 1e-3;
  DecodeStepLoad load;
  load.selection_on_critical_path = true;
  load.background_pages = 7;
  load.page = {1e-3, 0.0, 1, 100};
  load.streamed = true;
  const auto r = simulate_decode_step(load, compute, true);
  CHECK(r.background_time == Approx(7e-3));
  CHECK(r.exposed == Approx(3e-3));
  CHECK(r.timeline.lanes_disjoint());
  CHECK(r.timeline.makespan() == Approx(r.step_time));
}

TEST_CASE("synchronous correction recall prepends to the critical path") {
  ComputeModel compute;
  DecodeStepLoad load;
  load.selection_on_critical_path = true;
  load.sync_pages = 3;
  load.page = {5e-6, 1e-6, 1, 100};
  load.streamed = true;
  const auto r = simulate_decode_step(load, compute, true);
  CHECK(r.sync_time == Approx(compute.selection_time + streamed_recall_makespan(3, 5e-6, 1e-6)));
  CHECK(r.step_time == Approx(r.sync_time + r.compute_time));
}

TEST_CASE("without overlap all background work is exposed") {
  ComputeModel compute;
  DecodeStepLoad load;
  load.background_pages = 4;
  load.page = {5e-6, 0.0, 1, 100};
  const auto r = simulate_decode_step(load, compute, false);
  CHECK(r.exposed == Approx(compute.selection_time + 20e-6));
  CHECK(r.timeline.lanes_disjoint());
}

TEST_CASE("exposed time is monotone in bandwidth and plan size") {
  const ModelDims dims{8, 4, 128, 32, 2};
  ComputeModel compute;
  double last = 1e9;
  for (double bw = 1e9; bw <= 64e9; bw *= 2) {
    const auto load = decode_step_load(0, 64, true, dims, HostLayout::Hnd, LinkModel{bw, 2e-6}, compute, true);
    const double e = simulate_decode_step(load, compute, true).exposed;
    CHECK(e <= last);
    last = e;
  }
  last = -1.0;
  for (std::size_t n = 0; n <= 200; n += 10) {
    const auto load = decode_step_load(0, n, true, dims, HostLayout::Hnd, LinkModel{}, compute, true);
    const double e = simulate_decode_step(load, compute, true).exposed;
    CHECK(e >= last);
    last = e;
  }
}

TEST_CASE("timeline CSV") {
  Timeline tl;
  tl.add(0.0, 1e-6, Lane::Transfer, "copy0");
  std::ostringstream out;
  tl.write_csv(out);
  CHECK(out.str() == "lane,label,start_us,end_us\ntransfer,copy0,0.000,1.000\n");
}

TEST_CASE("model parameters are validated") {
  CHECK(model_violations(LinkModel{}, ComputeModel{}).empty());
  CHECK(model_violations(LinkModel{0.0, -1.0}, ComputeModel{}).size() == 2);
}
