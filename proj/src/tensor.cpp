#include "dplc/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dplc {

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ")";
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_to_string(s));
    n *= d;
  }
  return n;
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data) m = std::max(m, std::abs(v));
  return m;
}

MatMap as_matrix(Tensor& t, std::int64_t rows, std::int64_t cols) {
  if (rows * cols != t.numel())
    throw std::invalid_argument("as_matrix: view does not match tensor size");
  return MatMap(t.data.data(), rows, cols);
}

ConstMatMap as_matrix(const Tensor& t, std::int64_t rows, std::int64_t cols) {
  if (rows * cols != t.numel())
    throw std::invalid_argument("as_matrix: view does not match tensor size");
  return ConstMatMap(t.data.data(), rows, cols);
}

MatMap as_matrix(Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("as_matrix: tensor is not rank 2");
  return MatMap(t.data.data(), t.shape[0], t.shape[1]);
}

ConstMatMap as_matrix(const Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("as_matrix: tensor is not rank 2");
  return ConstMatMap(t.data.data(), t.shape[0], t.shape[1]);
}

}  // namespace dplc
