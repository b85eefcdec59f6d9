#pragma once

// Everything at once: model, pruning, training and the benchmark helpers.

#include "asvit/bench.hpp"
#include "asvit/checkpoint.hpp"
#include "asvit/gradcheck.hpp"
#include "asvit/train.hpp"

namespace asvit {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace asvit
