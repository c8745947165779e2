#include <doctest.h>

#include <cmath>
#include <numeric>

#include "elab/error.hpp"
#include "elab/model.hpp"
#include "elab/rng.hpp"
#include "oracles.hpp"

using namespace elab;

namespace {

ModelConfig tiny(std::uint64_t seed = 1) {
  ModelConfig c;
  c.vocab_size = 24;
  c.embed_dim = 8;
  c.num_layers = 2;
  c.num_heads = 2;
  c.mlp_hidden = 16;
  c.max_positions = 6;
  c.seed = seed;
  return c;
}

Matrix random_prefix(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(n, d);
  for (auto& v : x.data) v = rng.normal();
  return x;
}

ProbVector random_target(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> z(n);
  for (auto& v : z) v = 2.0 * rng.normal();
  return ProbVector(oracle::softmax(z));
}

}  // namespace

TEST_CASE("init is deterministic and shaped by the config") {
  ModelConfig c;
  CHECK(init_random_model(c) == init_random_model(c));
  CHECK(c.head_dim() == 16);
  c.seed = 1;
  CHECK_FALSE(init_random_model(c) == init_random_model(ModelConfig{}));
}

TEST_CASE("init statistics match the declared distributions") {
  const ModelConfig c;
  const auto m = init_random_model(c);
  bool finite = true;
  for_each_tensor(m, [&](std::span<const double> t) {
    for (double v : t) finite &= std::isfinite(v);
  });
  CHECK(finite);
  // Projection entries ~ N(0, 1/d): the sample mean has sd 1/sqrt(d * count).
  const auto& w = m.blocks[0].qkv.data;
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  const double sd = 1.0 / std::sqrt(static_cast<double>(c.embed_dim) * static_cast<double>(w.size()));
  CHECK(std::abs(mean) < 5 * sd);
  double var = 0;
  for (double v : w) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.size() - 1);
  CHECK(var == doctest::Approx(1.0 / static_cast<double>(c.embed_dim)).epsilon(0.05));
}

TEST_CASE("config validation") {
  ModelConfig c = tiny();
  c.num_heads = 3;
  CHECK_THROWS_AS(init_random_model(c), InvalidArgument);
  c = tiny();
  c.vocab_size = 0;
  CHECK_THROWS_AS(init_random_model(c), InvalidArgument);
}

TEST_CASE("embed_tokens") {
  const auto m = init_random_model(tiny());
  const std::vector<TokenId> seven = {7};
  const auto e = embed_tokens(m, seven);
  CHECK(e.rows == 1);
  CHECK(std::vector<double>(e.row(0).begin(), e.row(0).end()) ==
        std::vector<double>(m.token_embeddings.row(7).begin(), m.token_embeddings.row(7).end()));
  CHECK(embed_tokens(m, std::vector<TokenId>{}).rows == 0);
  const auto twice = embed_tokens(m, std::vector<TokenId>{3, 3});
  CHECK(std::equal(twice.row(0).begin(), twice.row(0).end(), twice.row(1).begin()));
  CHECK_THROWS_AS(embed_tokens(m, std::vector<TokenId>{24}), InvalidToken);
}

TEST_CASE("forward pass") {
  auto m = init_random_model(tiny());
  const auto x = random_prefix(4, 8, 5);
  const auto p = next_token_distribution(m, x);
  CHECK(std::abs(std::accumulate(p.values().begin(), p.values().end(), 0.0) - 1.0) <= 1e-9);
  CHECK(next_token_distribution(m, x) == p);
  CHECK_THROWS_AS(next_token_distribution(m, random_prefix(7, 8, 5)), CapacityError);
  ForwardOptions lead{TokenId{0}};
  CHECK_NOTHROW(next_token_distribution(m, random_prefix(5, 8, 5), lead));
  CHECK_THROWS_AS(next_token_distribution(m, random_prefix(6, 8, 5), lead), CapacityError);

  Matrix bad = x;
  bad(1, 2) = NAN;
  CHECK_THROWS_AS(next_token_distribution(m, bad), NumericError);

  std::fill(m.output_projection.data.begin(), m.output_projection.data.end(), 0.0);
  const auto u = next_token_distribution(m, x);
  CHECK(u == ProbVector::uniform(24));
  CHECK(u.entropy_bits() == doctest::Approx(max_entropy_bits(24)).epsilon(1e-12));
}

TEST_CASE("attention is causal") {
  const auto m = init_random_model(tiny());
  auto x = random_prefix(5, 8, 6);
  const auto before = hidden_states(m, x);
  for (std::size_t j = 0; j < 8; ++j) x(4, j) += 1.0;
  const auto after = hidden_states(m, x);
  CHECK(before.size() == 3);
  for (std::size_t l = 0; l < before.size(); ++l)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t j = 0; j < 8; ++j) CHECK(before[l](r, j) == after[l](r, j));
  CHECK(before.back()(4, 0) != after.back()(4, 0));
}

TEST_CASE("KL loss at the model's own output is zero with vanishing gradient") {
  const auto m = init_random_model(tiny());
  const auto x = random_prefix(3, 8, 7);
  const auto q = next_token_distribution(m, x);
  const auto lg = kl_loss_and_prefix_gradient(m, x, q);
  CHECK(std::abs(lg.loss_nats) <= 1e-12);
  double norm = 0;
  for (double g : lg.grad.data) norm += g * g;
  CHECK(std::sqrt(norm) <= 1e-7);
}

TEST_CASE("prefix gradient matches central differences") {
  for (std::uint64_t seed : {2, 3}) {
    const auto m = init_random_model(tiny(seed));
    const auto t = random_target(24, seed + 10);
    for (const ForwardOptions& opts : {ForwardOptions{}, ForwardOptions{TokenId{5}}}) {
      const auto x = random_prefix(3, 8, seed + 20);
      const auto lg = kl_loss_and_prefix_gradient(m, x, t, opts);
      CHECK(lg.loss_nats == kl_loss(m, x, t, opts).loss_nats);
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        Matrix a = x, b = x;
        a.data[i] += 1e-4;
        b.data[i] -= 1e-4;
        const double fd = (kl_loss(m, a, t, opts).loss_nats - kl_loss(m, b, t, opts).loss_nats) / 2e-4;
        const double g = lg.grad.data[i];
        CHECK(std::abs(fd - g) <= 1e-4 * std::max({std::abs(fd), std::abs(g), 1e-12}));
      }
    }
  }
}

TEST_CASE("checksum tracks the weights") {
  auto m = init_random_model(tiny());
  const auto c = checksum(m);
  CHECK(checksum(init_random_model(tiny())) == c);
  m.blocks[1].mlp_out_bias[0] += 1e-12;
  CHECK(checksum(m) != c);
}
