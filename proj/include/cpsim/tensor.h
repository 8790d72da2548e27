// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cpsim {

using Shape = std::vector<std::size_t>;

std::size_t shape_elements(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major array of doubles. Copyable value type; equality is
// bit-exact over shape and data.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const double& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const double& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  bool all_finite() const;

  // Same data viewed with a different shape of equal element count.
  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Largest elementwise |a - b|. Shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& t);

// Concatenation and slicing along an arbitrary axis.
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& t, std::size_t axis, std::size_t begin, std::size_t count);

// Selects entries along `axis` in the given order (indices may repeat).
Tensor take(const Tensor& t, std::size_t axis, std::span<const std::size_t> indices);

// dst[..., indices[i], ...] += src[..., i, ...] along `axis`.
void scatter_add(Tensor& dst, const Tensor& src, std::size_t axis,
                 std::span<const std::size_t> indices);

// dst[..., indices[i], ...] = src[..., i, ...] along `axis`.
void scatter(Tensor& dst, const Tensor& src, std::size_t axis,
             std::span<const std::size_t> indices);

}  // namespace cpsim
