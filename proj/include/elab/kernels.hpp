#pragma once

// Dense kernels used by the transformer forward/backward pass and by the
// hard-prompt candidate scoring. Each kernel has a serial reference in
// `kernels::serial` and an OpenMP version in `kernels::omp`.
//
// Both versions partition work only over output elements and accumulate each
// output in the same order, so their results are bit-identical. Tests rely on
// that; do not introduce parallel reductions here.

#include <cstddef>
#include <span>

#include "elab/matrix.hpp"

namespace elab::kernels {

namespace serial {

// y = x * w + bias.  x: n x k, w: k x m, bias: m (may be empty), y: n x m.
void matmul(const Matrix& x, const Matrix& w, std::span<const double> bias, Matrix& y);

// dx = dy * w^T.  dy: n x m, w: k x m-shaped as k x m, dx: n x k.
void matmul_grad_input(const Matrix& dy, const Matrix& w, Matrix& dx);

// y[j] = sum_i x[i] * w(i, j).  x: k, w: k x m, y: m.
void vecmat(std::span<const double> x, const Matrix& w, std::span<double> y);

// y[i] = sum_j w(i, j) * x[j].  w: k x m, x: m, y: k.
void matvec(const Matrix& w, std::span<const double> x, std::span<double> y);

// score[v] = sum_j (table(v, j) - anchor[j]) * direction[j].
void candidate_scores(const Matrix& table, std::span<const double> anchor,
                      std::span<const double> direction, std::span<double> score);

}  // namespace serial

namespace omp {

void matmul(const Matrix& x, const Matrix& w, std::span<const double> bias, Matrix& y);
void matmul_grad_input(const Matrix& dy, const Matrix& w, Matrix& dx);
void vecmat(std::span<const double> x, const Matrix& w, std::span<double> y);
void matvec(const Matrix& w, std::span<const double> x, std::span<double> y);
void candidate_scores(const Matrix& table, std::span<const double> anchor,
                      std::span<const double> direction, std::span<double> score);

}  // namespace omp

// Below this many multiply-adds the OpenMP kernels run on the calling thread.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

// Sets the OpenMP worker count used by both kernel-level and job-level
// parallel regions. 0 leaves the runtime default.
void set_num_threads(int threads);
int num_threads();

}  // namespace elab::kernels
