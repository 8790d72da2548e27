// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#include "cpsim/tensor.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "cpsim/error.h"

namespace cpsim {

std::size_t shape_elements(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_to_string(shape));
  }
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_elements(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != shape_elements(shape_)) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_to_string(shape_));
  }
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_elements(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double x : t.data()) m = std::max(m, std::abs(x));
  return m;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw ShapeError("concat axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != shape.size()) throw ShapeError("concat rank mismatch");
    total += probe[axis];
    probe[axis] = shape[axis];
    if (probe != shape) {
      throw ShapeError("concat shape mismatch: " + shape_to_string(p.shape()) + " vs " +
                       shape_to_string(parts.front().shape()));
    }
  }
  shape[axis] = total;
  Tensor result(shape);
  const auto split = split_at(shape, axis);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t extent = p.dim(axis);
    for (std::size_t o = 0; o < split.outer; ++o) {
      const double* src = p.data().data() + o * extent * split.inner;
      double* dst = result.data().data() + (o * split.extent + offset) * split.inner;
      std::copy(src, src + extent * split.inner, dst);
    }
    offset += extent;
  }
  return result;
}

Tensor slice(const Tensor& t, std::size_t axis, std::size_t begin, std::size_t count) {
  const auto split = split_at(t.shape(), axis);
  if (count == 0 || begin + count > split.extent) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_to_string(t.shape()));
  }
  Shape shape = t.shape();
  shape[axis] = count;
  Tensor result(shape);
  for (std::size_t o = 0; o < split.outer; ++o) {
    const double* src = t.data().data() + (o * split.extent + begin) * split.inner;
    double* dst = result.data().data() + o * count * split.inner;
    std::copy(src, src + count * split.inner, dst);
  }
  return result;
}

Tensor take(const Tensor& t, std::size_t axis, std::span<const std::size_t> indices) {
  const auto split = split_at(t.shape(), axis);
  if (indices.empty()) throw ShapeError("take with no indices");
  Shape shape = t.shape();
  shape[axis] = indices.size();
  Tensor result(shape);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= split.extent) throw ShapeError("take index out of range");
      const double* src = t.data().data() + (o * split.extent + indices[i]) * split.inner;
      double* dst = result.data().data() + (o * indices.size() + i) * split.inner;
      std::copy(src, src + split.inner, dst);
    }
  }
  return result;
}

namespace {

template <typename Op>
void scatter_impl(Tensor& dst, const Tensor& src, std::size_t axis,
                  std::span<const std::size_t> indices, Op op) {
  const auto dsplit = split_at(dst.shape(), axis);
  const auto ssplit = split_at(src.shape(), axis);
  if (ssplit.extent != indices.size() || ssplit.outer != dsplit.outer || ssplit.inner != dsplit.inner) {
    throw ShapeError("scatter: " + shape_to_string(src.shape()) + " into " + shape_to_string(dst.shape()));
  }
  for (std::size_t o = 0; o < dsplit.outer; ++o) {
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= dsplit.extent) throw ShapeError("scatter index out of range");
      const double* s = src.data().data() + (o * ssplit.extent + i) * ssplit.inner;
      double* d = dst.data().data() + (o * dsplit.extent + indices[i]) * dsplit.inner;
      for (std::size_t e = 0; e < dsplit.inner; ++e) op(d[e], s[e]);
    }
  }
}

}  // namespace

void scatter_add(Tensor& dst, const Tensor& src, std::size_t axis, std::span<const std::size_t> indices) {
  scatter_impl(dst, src, axis, indices, [](double& d, double s) { d += s; });
}

void scatter(Tensor& dst, const Tensor& src, std::size_t axis, std::span<const std::size_t> indices) {
  scatter_impl(dst, src, axis, indices, [](double& d, double s) { d = s; });
}

}  // namespace cpsim
