#include "elab/kernels.hpp"

#include <omp.h>

#include <cassert>

namespace elab::kernels {

namespace {

inline double dot_row_col(const Matrix& x, std::size_t i, const Matrix& w, std::size_t j) {
  double acc = 0.0;
  for (std::size_t k = 0; k < x.cols; ++k) acc += x(i, k) * w(k, j);
  return acc;
}

inline double dot_rows(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t k = 0; k < n; ++k) acc += a[k] * b[k];
  return acc;
}

inline double score_row(const Matrix& table, std::size_t v, std::span<const double> anchor,
                        std::span<const double> direction) {
  const double* row = table.data.data() + v * table.cols;
  double acc = 0.0;
  for (std::size_t j = 0; j < table.cols; ++j) acc += (row[j] - anchor[j]) * direction[j];
  return acc;
}

}  // namespace

namespace serial {

void matmul(const Matrix& x, const Matrix& w, std::span<const double> bias, Matrix& y) {
  assert(x.cols == w.rows);
  y = Matrix(x.rows, w.cols);
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < w.cols; ++j)
      y(i, j) = (bias.empty() ? 0.0 : bias[j]) + dot_row_col(x, i, w, j);
}

void matmul_grad_input(const Matrix& dy, const Matrix& w, Matrix& dx) {
  assert(dy.cols == w.cols);
  dx = Matrix(dy.rows, w.rows);
  for (std::size_t i = 0; i < dy.rows; ++i)
    for (std::size_t k = 0; k < w.rows; ++k)
      dx(i, k) = dot_rows(dy.data.data() + i * dy.cols, w.data.data() + k * w.cols, w.cols);
}

void vecmat(std::span<const double> x, const Matrix& w, std::span<double> y) {
  assert(x.size() == w.rows && y.size() == w.cols);
  for (std::size_t j = 0; j < w.cols; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < w.rows; ++i) acc += x[i] * w(i, j);
    y[j] = acc;
  }
}

void matvec(const Matrix& w, std::span<const double> x, std::span<double> y) {
  assert(x.size() == w.cols && y.size() == w.rows);
  for (std::size_t i = 0; i < w.rows; ++i) y[i] = dot_rows(w.data.data() + i * w.cols, x.data(), w.cols);
}

void candidate_scores(const Matrix& table, std::span<const double> anchor,
                      std::span<const double> direction, std::span<double> score) {
  for (std::size_t v = 0; v < table.rows; ++v) score[v] = score_row(table, v, anchor, direction);
}

}  // namespace serial

namespace omp {

void matmul(const Matrix& x, const Matrix& w, std::span<const double> bias, Matrix& y) {
  assert(x.cols == w.rows);
  y = Matrix(x.rows, w.cols);
  const auto n = static_cast<std::ptrdiff_t>(x.rows * w.cols);
  const std::size_t cols = w.cols;
#pragma omp parallel for schedule(static) if (x.rows * w.cols * x.cols > kParallelThreshold)
  for (std::ptrdiff_t idx = 0; idx < n; ++idx) {
    const auto i = static_cast<std::size_t>(idx) / cols;
    const auto j = static_cast<std::size_t>(idx) % cols;
    y(i, j) = (bias.empty() ? 0.0 : bias[j]) + dot_row_col(x, i, w, j);
  }
}

void matmul_grad_input(const Matrix& dy, const Matrix& w, Matrix& dx) {
  assert(dy.cols == w.cols);
  dx = Matrix(dy.rows, w.rows);
  const auto n = static_cast<std::ptrdiff_t>(dy.rows * w.rows);
  const std::size_t cols = w.rows;
#pragma omp parallel for schedule(static) if (dy.rows * w.rows * w.cols > kParallelThreshold)
  for (std::ptrdiff_t idx = 0; idx < n; ++idx) {
    const auto i = static_cast<std::size_t>(idx) / cols;
    const auto k = static_cast<std::size_t>(idx) % cols;
    dx(i, k) = dot_rows(dy.data.data() + i * dy.cols, w.data.data() + k * w.cols, w.cols);
  }
}

void vecmat(std::span<const double> x, const Matrix& w, std::span<double> y) {
  assert(x.size() == w.rows && y.size() == w.cols);
  const auto m = static_cast<std::ptrdiff_t>(w.cols);
#pragma omp parallel for schedule(static) if (w.rows * w.cols > kParallelThreshold)
  for (std::ptrdiff_t j = 0; j < m; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < w.rows; ++i) acc += x[i] * w(i, static_cast<std::size_t>(j));
    y[static_cast<std::size_t>(j)] = acc;
  }
}

void matvec(const Matrix& w, std::span<const double> x, std::span<double> y) {
  assert(x.size() == w.cols && y.size() == w.rows);
  const auto k = static_cast<std::ptrdiff_t>(w.rows);
#pragma omp parallel for schedule(static) if (w.rows * w.cols > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < k; ++i) {
    const auto r = static_cast<std::size_t>(i);
    y[r] = dot_rows(w.data.data() + r * w.cols, x.data(), w.cols);
  }
}

void candidate_scores(const Matrix& table, std::span<const double> anchor,
                      std::span<const double> direction, std::span<double> score) {
  const auto n = static_cast<std::ptrdiff_t>(table.rows);
#pragma omp parallel for schedule(static) if (table.rows * table.cols > kParallelThreshold)
  for (std::ptrdiff_t v = 0; v < n; ++v)
    score[static_cast<std::size_t>(v)] = score_row(table, static_cast<std::size_t>(v), anchor, direction);
}

}  // namespace omp

void set_num_threads(int threads) {
  if (threads > 0) omp_set_num_threads(threads);
}

int num_threads() { return omp_get_max_threads(); }

}  // namespace elab::kernels
