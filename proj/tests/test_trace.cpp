// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "freekv/trace.hpp"
#include "support.hpp"

using namespace freekv;

namespace {

ErrorCode decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_trace(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("decode succeeded");
  return ErrorCode::InvalidConfig;
}

void put_u32_at(std::vector<std::uint8_t>& bytes, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

}  // namespace

TEST_CASE("binary16 conversions") {
  CHECK(float_to_half(1.0f) == 0x3c00);
  CHECK(float_to_half(-2.0f) == 0xc000);
  CHECK(float_to_half(0.0f) == 0x0000);
  CHECK(float_to_half(65504.0f) == 0x7bff);
  CHECK(float_to_half(1e6f) == 0x7c00);
  CHECK(half_to_float(0x3555) == Catch::Approx(0.33325195).epsilon(1e-7));
  CHECK(half_to_float(0x0001) == std::ldexp(1.0f, -24));
  CHECK(float_to_half(1.0f + std::ldexp(1.0f, -11)) == 0x3c00);
  CHECK(float_to_half(1.0f + 3 * std::ldexp(1.0f, -11)) == 0x3c02);
  for (std::uint32_t h = 0; h < 0x7c00; ++h) {
    REQUIRE(float_to_half(half_to_float(static_cast<std::uint16_t>(h))) == h);
    REQUIRE(float_to_half(half_to_float(static_cast<std::uint16_t>(h | 0x8000))) == (h | 0x8000));
  }
  CHECK(std::isinf(half_to_float(0x7c00)));
  CHECK(std::isnan(half_to_float(float_to_half(std::numeric_limits<float>::quiet_NaN()))));
}

TEST_CASE("trace round trip in both element kinds") {
  for (bool half : {false, true}) {
    GeneratorOptions opt;
    opt.seed = 9;
    opt.dims = {2, 4, 2, 8};
    opt.prefill_len = 20;
    opt.steps = 5;
    opt.half = half;
    const auto trace = generate_synthetic_trace(opt).trace;
    const auto bytes = encode_trace(trace);
    CHECK(bytes.size() == 36 + (2 * 2 * 20 * 16 + 5 * 2 * (32 + 32)) * (half ? 2 : 4));
    const auto back = decode_trace(bytes);
    CHECK(back.header() == trace.header());
    CHECK(encode_trace(back) == bytes);
    CHECK(back.query(4, 1)[7] == trace.query(4, 1)[7]);
    CHECK(back.token_key(1, 21, 1)[3] == trace.key(1, 1)[8 + 3]);
    CHECK(back.token_value(0, 5, 0)[0] == trace.prefill_values(0)[5 * 16]);
  }
}

TEST_CASE("trace files") {
  const auto trace = testing::small_trace(3, 1, 2, 1, 4, 10, 2);
  const auto path = (std::filesystem::temp_directory_path() / "freekv_trace_test.bin").string();
  write_trace(path, trace);
  CHECK(encode_trace(read_trace(path)) == encode_trace(trace));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_trace(path), Error);
}

TEST_CASE("corrupt traces are rejected") {
  const auto good = encode_trace(testing::small_trace(3, 1, 2, 1, 4, 10, 2));
  auto bad = good;
  bad[0] = 'X';
  CHECK(decode_error(bad) == ErrorCode::TraceCorrupt);
  bad = good;
  put_u32_at(bad, 4, 2);
  CHECK(decode_error(bad) == ErrorCode::TraceCorrupt);
  bad = good;
  put_u32_at(bad, 24, 7);
  CHECK(decode_error(bad) == ErrorCode::TraceCorrupt);
  bad = good;
  put_u32_at(bad, 16, 0);
  CHECK(decode_error(bad) == ErrorCode::TraceCorrupt);
  bad = good;
  put_u32_at(bad, 12, 3);
  CHECK(decode_error(bad) == ErrorCode::TraceCorrupt);
  bad = good;
  bad.pop_back();
  CHECK(decode_error(bad) == ErrorCode::TraceCorrupt);
  bad = good;
  bad.push_back(0);
  CHECK(decode_error(bad) == ErrorCode::TraceCorrupt);
  CHECK(decode_error(std::vector<std::uint8_t>(good.begin(), good.begin() + 20)) == ErrorCode::TraceCorrupt);
  bad = good;
  put_u32_at(bad, 32, 3);
  CHECK(decode_error(bad) == ErrorCode::TraceCorrupt);
}

TEST_CASE("FNV-1a reference values") {
  CHECK(fnv1a64(std::span<const std::uint8_t>()) == 0xcbf29ce484222325ull);
  const std::uint8_t a[] = {'a'};
  CHECK(fnv1a64(std::span<const std::uint8_t>(a)) == 0xaf63dc4c8601ec8cull);
  const std::string foobar = "foobar";
  CHECK(fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(foobar.data()), 6)) ==
        0x85944171f73967e8ull);
}
