// Copyright (c) 2026, cpsim authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

#include "cpsim/tensor.h"

namespace cpsim {

// Uniform [-1, 1) doubles from std::mt19937_64. The engine's output sequence
// is fixed by the standard; the conversion takes the top 53 bits, so the
// stream is identical on every conforming platform (unlike
// std::uniform_real_distribution).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform_pm1() {
    const double unit = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    return 2.0 * unit - 1.0;
  }

  Tensor uniform(Shape shape) {
    Tensor t(std::move(shape));
    for (double& x : t.data()) x = uniform_pm1();
    return t;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cpsim
