#pragma once

#include <string>

#include "simva/params.hpp"

namespace simva {

// Weight-space ensembling: elementwise (1-beta)*base + beta*tuned over every
// registered array. When `prefix` is non-empty only matching names are
// blended; the rest are copied from `tuned` (matches encoder-only blending
// when a real backbone is attached). beta = 0 / 1 return bitwise copies.
ParameterStore wse_blend(const ParameterStore& base, const ParameterStore& tuned, double beta,
                         const std::string& prefix = "");

} // namespace simva
