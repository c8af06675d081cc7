// SPDX-License-Identifier: Apache-2.0
//
// freekv: trace generation, engine runs, mode comparison and latency what-ifs.
// Exit codes: 0 ok, 1 usage, 2 data error, 3 invariant violated at runtime.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "freekv/config_file.hpp"
#include "freekv/engine.hpp"
#include "freekv/generator.hpp"
#include "freekv/latency_sim.hpp"
#include "freekv/report.hpp"
#include "freekv/trace.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kDataError = 2;
constexpr int kInvariant = 3;

struct GenArgs {
  std::uint64_t seed = 1;
  std::size_t steps = 64;
  std::string dims = "2,8,2,32";
  std::size_t prefill = 512;
  std::string similarity = "0.95";
  std::string out;
  bool half = false;
  double query_scale = 2.0;
};

struct RunArgs {
  std::string trace;
  std::string config;
  std::string out_dir;
  std::string mode;
  bool no_oracle = false;
  bool exact = false;
};

struct CompareArgs {
  std::string trace;
  std::vector<std::string> configs;
  std::string out_dir;
};

struct SimArgs {
  std::size_t pages = 8;
  std::string layout = "hnd";
  bool streamed = false;
  double bandwidth = freekv::LinkModel{}.bandwidth;
  double per_op_latency = freekv::LinkModel{}.per_op_latency;
  double conversion_throughput = freekv::ComputeModel{}.conversion_throughput;
  std::size_t n_kv = 8;
  std::size_t head_dim = 128;
  std::size_t page_size = 32;
  std::size_t elem_bytes = 2;
  std::string timeline;
};

bool is_runtime_invariant(freekv::ErrorCode code) {
  using freekv::ErrorCode;
  return code == ErrorCode::PageNotResident || code == ErrorCode::BarrierNotReached ||
         code == ErrorCode::CapacityExceeded;
}

freekv::GeneratorDims parse_dims(const std::string& text) {
  std::vector<std::size_t> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) v.push_back(static_cast<std::size_t>(std::stoul(item)));
  if (v.size() != 4) throw freekv::Error(freekv::ErrorCode::ConfigError, "--dims expects n_layers,n_qo,n_kv,d");
  return {v[0], v[1], v[2], v[3]};
}

int cmd_gen(const GenArgs& a) {
  freekv::GeneratorOptions opt;
  opt.seed = a.seed;
  opt.steps = a.steps;
  opt.prefill_len = a.prefill;
  opt.dims = parse_dims(a.dims);
  opt.schedule = freekv::parse_schedule(a.similarity);
  opt.half = a.half;
  opt.query_scale = a.query_scale;
  const auto g = freekv::generate_synthetic_trace(opt);
  freekv::write_trace(a.out, g.trace);
  std::cout << "wrote " << a.out << " hash=" << freekv::hex64(freekv::fnv1a64(freekv::encode_trace(g.trace)))
            << " max_similarity_deviation=" << g.max_deviation << '\n';
  return g.max_deviation <= 0.05 ? kOk : kInvariant;
}

freekv::RunConfig load_config(const std::string& path) {
  return path.empty() ? freekv::RunConfig{} : freekv::read_run_config(path);
}

int cmd_run(const RunArgs& a) {
  const auto trace = freekv::read_trace(a.trace);
  auto rc = load_config(a.config);
  if (!a.mode.empty()) freekv::apply_config_entry(rc, "mode", a.mode);
  freekv::EngineOptions opt;
  opt.compare_oracle = !a.no_oracle;
  opt.compare_exact = a.exact;
  const auto r = freekv::run_engine(trace, rc, opt);
  std::filesystem::create_directories(a.out_dir);
  freekv::write_run_outputs(a.out_dir, r);
  const auto& m = r.metrics;
  std::cout << "mode=" << m.config_mode << " correction_rate=" << m.correction_rate
            << " jaccard=" << m.selection_jaccard << " max_err=" << m.max_abs_error_vs_oracle
            << " makespan_s=" << m.simulated_makespan << " digest=" << m.output_digest << '\n';
  for (const auto& v : m.invariant_violations) std::cerr << "invariant violated: " << v << '\n';
  return m.invariant_violations.empty() ? kOk : kInvariant;
}

int cmd_compare(const CompareArgs& a) {
  const auto trace = freekv::read_trace(a.trace);
  std::vector<freekv::NamedConfig> configs;
  for (const auto& path : a.configs) configs.push_back({std::filesystem::path(path).stem().string(), load_config(path)});
  const auto report = freekv::compare_modes(trace, configs);
  std::filesystem::create_directories(a.out_dir);
  std::ofstream csv(a.out_dir + "/comparison.csv");
  freekv::write_comparison_csv(csv, report);
  std::ofstream(a.out_dir + "/comparison.json") << freekv::to_json(report).dump(2) << '\n';
  freekv::write_comparison_csv(std::cout, report);
  for (const auto& [name, run] : report.runs) {
    if (!run.metrics.invariant_violations.empty()) return kInvariant;
  }
  return kOk;
}

int cmd_sim(const SimArgs& a) {
  const auto layout = freekv::parse_host_layout(a.layout);
  if (!layout) throw freekv::Error(freekv::ErrorCode::ConfigError, "--layout must be hnd or nhd");
  freekv::LinkModel link{a.bandwidth, a.per_op_latency};
  freekv::ComputeModel compute;
  compute.conversion_throughput = a.conversion_throughput;
  if (auto v = freekv::model_violations(link, compute); !v.empty()) throw freekv::InvalidConfig(std::move(v));
  const freekv::ModelDims dims{a.n_kv, a.n_kv, a.head_dim, a.page_size, a.elem_bytes};
  const auto cost = freekv::recall_page_cost(dims, *layout, link, compute);
  const auto tl = freekv::simulate_recall(a.pages, cost, a.streamed);
  std::cout << "pages=" << a.pages << " layout=" << a.layout << " streamed=" << (a.streamed ? "true" : "false")
            << " ops_per_page=" << cost.ops << " bytes_per_page=" << cost.bytes << " transfer_us=" << cost.transfer * 1e6
            << " convert_us=" << cost.convert * 1e6 << " makespan_us=" << tl.makespan() * 1e6 << '\n';
  if (!a.timeline.empty()) {
    std::ofstream out(a.timeline);
    tl.write_csv(out);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speculative KV retrieval engine and latency model"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic trace");
  g->add_option("--seed", gen.seed);
  g->add_option("--steps", gen.steps);
  g->add_option("--dims", gen.dims, "n_layers,n_qo,n_kv,d");
  g->add_option("--prefill", gen.prefill);
  g->add_option("--similarity", gen.similarity, "e.g. 0.95*10,0.5,0.95");
  g->add_option("--query-scale", gen.query_scale);
  g->add_flag("--half", gen.half, "store binary16");
  g->add_option("--out", gen.out)->required();

  RunArgs run;
  auto* r = app.add_subcommand("run", "run the engine on a trace");
  r->add_option("--trace", run.trace)->required();
  r->add_option("--config", run.config);
  r->add_option("--out-dir", run.out_dir)->required();
  r->add_option("--mode", run.mode)->check(CLI::IsMember({"speculative", "always_correct", "never_correct"}));
  r->add_flag("--no-oracle", run.no_oracle);
  r->add_flag("--exact", run.exact, "also compare against full attention");

  CompareArgs cmp;
  auto* c = app.add_subcommand("compare", "run several configs on one trace");
  c->add_option("--trace", cmp.trace)->required();
  c->add_option("--configs", cmp.configs)->required()->expected(2, -1);
  c->add_option("--out-dir", cmp.out_dir)->required();

  SimArgs sim;
  auto* s = app.add_subcommand("sim", "simulate one recall");
  s->add_option("--pages", sim.pages);
  s->add_option("--layout", sim.layout)->check(CLI::IsMember({"hnd", "nhd"}));
  s->add_flag("--streamed", sim.streamed);
  s->add_option("--bandwidth", sim.bandwidth);
  s->add_option("--per-op-latency", sim.per_op_latency);
  s->add_option("--conversion-throughput", sim.conversion_throughput);
  s->add_option("--n-kv", sim.n_kv);
  s->add_option("--d", sim.head_dim);
  s->add_option("--page-size", sim.page_size);
  s->add_option("--elem-bytes", sim.elem_bytes);
  s->add_option("--timeline", sim.timeline, "write timeline CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*r) return cmd_run(run);
    if (*c) return cmd_compare(cmp);
    if (*s) return cmd_sim(sim);
  } catch (const freekv::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return is_runtime_invariant(e.code()) ? kInvariant : kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kUsage;
}
