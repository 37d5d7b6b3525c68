#include <doctest.h>

#include <cmath>

#include "vimq/counters.hpp"
#include "vimq/metrics.hpp"
#include "vimq/run_config.hpp"
#include "vimq/verify.hpp"

using namespace vimq;

TEST_CASE("error metrics") {
  const std::vector<float> ref{3, 4}, same{3, 4}, off{3, 5}, opposite{-3, -4};
  auto s = compare(same, ref);
  CHECK(s.max_abs == 0.0);
  CHECK(s.relative == 0.0);
  CHECK(s.cosine == doctest::Approx(1.0));
  s = compare(off, ref);
  CHECK(s.max_abs == 1.0);
  CHECK(s.relative == doctest::Approx(0.2));
  CHECK(cosine_similarity(opposite, ref) == doctest::Approx(-1.0));
  CHECK(relative_error(std::vector<float>{0, 0}, std::vector<float>{0, 0}) == 0.0);
  CHECK_THROWS_AS(compare(std::vector<float>{1}, ref), ValidationError);
}

TEST_CASE("hashes") {
  // FNV-1a test vector for "a"
  const std::uint8_t a[] = {'a'};
  CHECK(fnv1a(a) == 0xaf63dc4c8601ec8cull);
  const std::vector<float> v{1.0f, 2.0f};
  CHECK(hash_floats(v).size() == 16);
  CHECK(hash_floats(v) == hash_floats(std::vector<float>{1.0f, 2.0f}));
  CHECK(hash_floats(v) != hash_floats(std::vector<float>{1.0f, 2.5f}));
}

TEST_CASE("perf log") {
  PerfLog log;
  EngineCounters c;
  c.tiles = 2;
  c.macs = 10;
  log.add("a", "linear", c);
  log.add("b", "linear", c);
  log.add("s", "ssm", c);
  CHECK(log.totals().at("linear").tiles == 4);
  const auto text = log.to_jsonl();
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  CHECK(text.find("\"engine\":\"ssm\"") != std::string::npos);
}

TEST_CASE("run config parsing") {
  const auto rc = parse_run_config(
      "# comment\n"
      "variant = small\n"
      "blocks = 3\n"
      "resolution = 128\n"
      "mode = both\n"
      "bits = 3\n"
      "block = 64\n"
      "smooth = false\n"
      "exp_mode = approx\n"
      "coarse.5 = 1,2,4\n"
      "fine.5 = 3,5,6\n"
      "\n");
  CHECK(rc.model.d_model == 384);
  CHECK(rc.model.n_blocks == 3);
  CHECK(rc.height == 128);
  CHECK(rc.width == 128);
  CHECK(rc.mode == RunMode::both);
  CHECK(rc.quant.weight_bits == 3);
  CHECK(rc.quant.block == 64);
  CHECK(!rc.quant.smooth);
  CHECK(rc.model.exp_mode == ExpMode::approx);
  CHECK(rc.bases.at(5).second == std::vector<int>{3, 5, 6});
  const auto qs5 = settings_for_bits(rc.quant, 5, rc.bases);
  CHECK(qs5.weight_bits == 5);
  CHECK(qs5.codebook().size() == 16);

  CHECK_THROWS_AS(parse_run_config("colour = red\n"), ValidationError);
  CHECK_THROWS_AS(parse_run_config("bits = four\n"), ValidationError);
  CHECK_THROWS_AS(parse_run_config("variant\n"), ValidationError);
  CHECK_THROWS_AS(parse_run_config("mode = sideways\n"), ValidationError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/config.txt"), ValidationError);
}

TEST_CASE("selftest passes and detects a corrupted blob") {
  SelftestOptions o;
  o.linear_layers = 4;
  const auto checks = run_selftest(o);
  CHECK(checks.size() >= 6);
  for (const auto& c : checks) CHECK_MESSAGE(c.pass, c.name << ": " << c.detail);

  o.corrupt_layer = 2;
  bool lut_failed = false;
  for (const auto& c : run_selftest(o))
    if (c.name == "lut_gemm") {
      lut_failed = !c.pass;
      CHECK(c.detail.find("selftest.2") != std::string::npos);
      CHECK(c.detail.find("token") != std::string::npos);
      CHECK(c.detail.find("output") != std::string::npos);
    } else {
      CHECK(c.pass);
    }
  CHECK(lut_failed);
}

TEST_CASE("exhaustive pre-shift products") {
  for (int bits : {3, 4, 5}) {
    const auto cb = codebook_for_bits(bits);
    std::size_t wrong = 0;
    for (int x = -127; x <= 127; ++x)
      for (std::size_t m = 0; m < cb.size(); ++m) {
        const auto p = exact_preshift_product(x, static_cast<std::uint8_t>(m), cb, 8);
        wrong += static_cast<double>(p) != std::ldexp(x * cb.levels[m], 8);
      }
    CHECK(wrong == 0);
  }
}
