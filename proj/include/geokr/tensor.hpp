#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace geokr {

// Dense row-major tensor. Shape is dynamic but indexing helpers cover the
// ranks the network actually uses (2 and 4).
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(t.expected_size(), T{0});
    return t;
  }

  std::size_t expected_size() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

  std::size_t numel() const { return data.size(); }

  std::size_t dim(std::size_t i) const {
    if (i >= shape.size()) throw std::invalid_argument("tensor dim out of range");
    return shape[i];
  }

  std::size_t rank() const { return shape.size(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // (row, col) for rank-2 tensors
  T& at2(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  const T& at2(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  // (n, c, y, x) for rank-4 tensors
  std::size_t index4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape[1] + c) * shape[2] + y) * shape[3] + x;
  }
  T& at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return data[index4(n, c, y, x)]; }
  const T& at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data[index4(n, c, y, x)];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

}  // namespace geokr
