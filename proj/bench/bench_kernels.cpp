// Serial reference kernels against their OpenMP versions, plus the full
// prefix gradient at the default model size. Thread count follows
// OMP_NUM_THREADS.
#include <benchmark/benchmark.h>

#include <vector>

#include "elab/kernels.hpp"
#include "elab/model.hpp"
#include "elab/rng.hpp"

namespace {

using namespace elab;

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, cols);
  for (double& x : m.data) x = rng.normal();
  return m;
}

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

template <auto Kernel>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix x = random_matrix(n, n, 1), w = random_matrix(n, n, 2);
  const std::vector<double> bias = random_vector(n, 3);
  Matrix y(n, n);
  for (auto _ : state) {
    Kernel(x, w, bias, y);
    benchmark::DoNotOptimize(y.data.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <auto Kernel>
void BM_matmul_grad_input(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix dy = random_matrix(n, n, 1), w = random_matrix(n, n, 2);
  Matrix dx(n, n);
  for (auto _ : state) {
    Kernel(dy, w, dx);
    benchmark::DoNotOptimize(dx.data.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <auto Kernel>
void BM_vecmat(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const std::size_t k = 64;
  const Matrix w = random_matrix(k, m, 1);
  const std::vector<double> x = random_vector(k, 2);
  std::vector<double> y(m);
  for (auto _ : state) {
    Kernel(x, w, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <auto Kernel>
void BM_candidate_scores(benchmark::State& state) {
  const auto vocab = static_cast<std::size_t>(state.range(0));
  const std::size_t d = 64;
  const Matrix table = random_matrix(vocab, d, 1);
  const std::vector<double> anchor = random_vector(d, 2), direction = random_vector(d, 3);
  std::vector<double> score(vocab);
  for (auto _ : state) {
    Kernel(table, anchor, direction, score);
    benchmark::DoNotOptimize(score.data());
  }
}

BENCHMARK(BM_matmul<kernels::serial::matmul>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul<kernels::omp::matmul>)->Name("matmul/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul_grad_input<kernels::serial::matmul_grad_input>)->Name("matmul_grad_input/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul_grad_input<kernels::omp::matmul_grad_input>)->Name("matmul_grad_input/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_vecmat<kernels::serial::vecmat>)->Name("vecmat/serial")->Arg(512)->Arg(32768);
BENCHMARK(BM_vecmat<kernels::omp::vecmat>)->Name("vecmat/omp")->Arg(512)->Arg(32768);
BENCHMARK(BM_candidate_scores<kernels::serial::candidate_scores>)->Name("candidate_scores/serial")->Arg(512)->Arg(32768);
BENCHMARK(BM_candidate_scores<kernels::omp::candidate_scores>)->Name("candidate_scores/omp")->Arg(512)->Arg(32768);

void BM_prefix_gradient(benchmark::State& state) {
  const ModelBundle model = init_random_model(ModelConfig{});
  const std::vector<TokenId> tokens = {1, 2, 3, 4, 5};
  const EmbeddingSequence prefix = embed_tokens(model, tokens);
  const ProbVector target = ProbVector::uniform(model.config.vocab_size);
  for (auto _ : state) benchmark::DoNotOptimize(kl_loss_and_prefix_gradient(model, prefix, target).loss_nats);
}
BENCHMARK(BM_prefix_gradient);

}  // namespace

BENCHMARK_MAIN();
