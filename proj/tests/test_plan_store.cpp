#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "elab/error.hpp"
#include "elab/store.hpp"

using namespace elab;

namespace {

std::string tmp(const std::string& name) {
  std::filesystem::create_directories(ELAB_TEST_TMP);
  return std::string(ELAB_TEST_TMP) + "/" + name;
}

ModelBundle small_model() {
  ModelConfig c;
  c.vocab_size = 20;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.mlp_hidden = 12;
  c.max_positions = 6;
  c.seed = 9;
  return init_random_model(c);
}

ExperimentPlan busy_plan() {
  ExperimentPlan p;
  p.experiment = ExperimentKind::outlier;
  p.seed = 123456789012345ULL;
  p.model_config.vocab_size = 64;
  p.entropy_grid = std::vector<double>{0.1, 1.0 / 3.0, 5.5};
  p.layouts = {PromptLayout::all_hard(4), PromptLayout::parse("mask:hsh")};
  p.tune_config.learning_rate = 0.123456789;
  p.tune_config.leading_token = 3;
  p.tune_config.soft_init = SoftInit::token_rows;
  p.outlier_counts = {1, 3};
  p.output_path = "out/x.csv";
  p.synthesis.alpha = 2.5;
  p.record_timing = true;
  return p;
}

}  // namespace

TEST_CASE("plan text round trip") {
  const auto p = busy_plan();
  CHECK(parse_plan(to_text(p)) == p);
  CHECK(parse_plan(to_text(ExperimentPlan{})) == ExperimentPlan{});
  CHECK(parse_plan("# nothing\n\n") == ExperimentPlan{});
  const auto q = parse_plan("experiment = lm_target\nseed = 7\nentropy_grid = 1, 2\n");
  CHECK(q.experiment == ExperimentKind::lm_target);
  CHECK(q.seed == 7);
  CHECK(q.resolved_grid() == std::vector<double>{1, 2});
  CHECK(parse_plan("entropy_grid =\n").resolved_grid().empty());
  CHECK_THROWS_AS(parse_plan("sed = 7\n"), InvalidArgument);
  CHECK_THROWS_AS(parse_plan("seed = x\n"), InvalidArgument);
  CHECK_THROWS_AS(parse_plan("seed 7\n"), InvalidArgument);
}

TEST_CASE("plan grid and validation") {
  ExperimentPlan p;
  p.model_config.vocab_size = 16;
  p.step_bits = 1.0;
  CHECK(p.resolved_grid() == std::vector<double>{0, 1, 2, 3, 4});
  p.entropy_grid = std::vector<double>{5.0};
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
  p = {};
  p.layouts = {PromptLayout::all_soft(17)};
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
}

TEST_CASE("model artifact round trip") {
  const auto m = small_model();
  save_model(tmp("m.elab"), m);
  const auto back = load_model(tmp("m.elab"));
  CHECK(back == m);
  CHECK(checksum(back) == checksum(m));
  const auto h = read_header(read_file(tmp("m.elab")));
  CHECK(h.kind == ArtifactKind::model);
  CHECK(h.format_version == kFormatVersion);
}

TEST_CASE("target artifact round trip and sidecar") {
  TargetSpec s;
  s.kind = TargetKind::outlier;
  s.target_entropy_bits = 2.0;
  s.seed = 5;
  const auto o = synth_outlier(s, 64);
  const TargetArtifact t{TargetKind::outlier, 2.0, 5, o.distribution, o.outlier_tokens, o.mass_bound, o.converged};
  save_target(tmp("t.elab"), t);
  CHECK(load_target(tmp("t.elab")) == t);
  std::ifstream meta(tmp("t.meta"));
  std::string all((std::istreambuf_iterator<char>(meta)), {});
  CHECK(all.find("achieved_entropy_bits") != std::string::npos);
  CHECK(all.find("outlier_mass") != std::string::npos);
}

TEST_CASE("prompt and plan artifacts round trip") {
  const auto m = small_model();
  const auto p = init_prompt(m, PromptLayout::parse("mask:hshs"), 3);
  CHECK(decode_prompt(encode_prompt(p)) == p);
  save_prompt(tmp("p.elab"), p);
  CHECK(load_prompt(tmp("p.elab")) == p);
  save_plan(tmp("plan.elab"), busy_plan());
  CHECK(load_plan(tmp("plan.elab")) == busy_plan());
}

TEST_CASE("corrupt containers are rejected") {
  const auto bytes = encode_model(small_model());
  SUBCASE("every single flipped payload byte fails the checksum") {
    for (std::size_t i = kHeaderSize; i < bytes.size(); i += 97) {
      auto b = bytes;
      b[i] ^= 0x01;
      CHECK_THROWS_AS(decode_model(b), CorruptionError);
    }
  }
  SUBCASE("header damage") {
    auto b = bytes;
    b[0] = 'X';
    CHECK_THROWS_AS(decode_model(b), CorruptionError);
    b = bytes;
    b[4] = 2;
    CHECK_THROWS_AS(decode_model(b), UnsupportedVersion);
    b = bytes;
    b[24] ^= 0x80;
    CHECK_THROWS_AS(decode_model(b), CorruptionError);
  }
  SUBCASE("truncation and trailing bytes") {
    for (std::size_t len : {std::size_t{0}, std::size_t{10}, kHeaderSize, bytes.size() - 1}) {
      std::vector<std::uint8_t> b(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(len));
      CHECK_THROWS_AS(decode_model(b), CorruptionError);
    }
    auto b = bytes;
    b.push_back(0);
    CHECK_THROWS_AS(decode_model(b), CorruptionError);
  }
  SUBCASE("kind mismatch") { CHECK_THROWS_AS(decode_plan(bytes), InvalidArgument); }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_model(tmp("does-not-exist.elab")), IoError); }
}

TEST_CASE("fnv1a64 reference values") {
  // Published FNV-1a 64-bit test vectors.
  CHECK(fnv1a64(nullptr, 0) == 0xcbf29ce484222325ULL);
  const std::uint8_t a[] = {'a'};
  CHECK(fnv1a64(a, 1) == 0xaf63dc4c8601ec8cULL);
  const std::uint8_t foobar[] = {'f', 'o', 'o', 'b', 'a', 'r'};
  CHECK(fnv1a64(foobar, 6) == 0x85944171f73967e8ULL);
}
