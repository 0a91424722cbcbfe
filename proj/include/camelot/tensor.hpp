#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <vector>

namespace camelot {

using DenseVector = std::vector<double>;

// Row-major so that every row (one token's key/value) is a contiguous span.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::span<const double> row_span(const Matrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline std::span<double> row_span(Matrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline DenseVector row_vector(const Matrix& m, Eigen::Index r) {
  auto s = row_span(m, r);
  return {s.begin(), s.end()};
}

/// Stacks equally sized vectors as the rows of a matrix. An empty list
/// yields a 0 x dim matrix.
inline Matrix stack_rows(const std::vector<DenseVector>& rows, std::size_t dim = 0) {
  const std::size_t d = rows.empty() ? dim : rows.front().size();
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != d) throw std::invalid_argument("stack_rows: ragged rows");
    for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

inline Matrix stack_rows(std::initializer_list<DenseVector> rows) {
  return stack_rows(std::vector<DenseVector>(rows));
}

}  // namespace camelot
