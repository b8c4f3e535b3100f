#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "kinelift/types.hpp"

namespace kinelift {

// Endpoint-inclusive even spacing over [0, frame_count): indices at
// round(k*(T-1)/(budget-1)), deduplicated. budget > T degenerates to every
// frame.
inline std::vector<std::int64_t> even_spaced_indices(std::int64_t frame_count, int budget) {
  if (frame_count < 2) throw input_error("even_spaced_indices: need at least 2 frames");
  if (budget < 2) throw input_error("even_spaced_indices: budget must be >= 2");
  std::vector<std::int64_t> out;
  for (int k = 0; k < budget; ++k) {
    const double pos = static_cast<double>(k) * static_cast<double>(frame_count - 1) / (budget - 1);
    const auto idx = static_cast<std::int64_t>(std::llround(pos));
    if (out.empty() || out.back() != idx) out.push_back(idx);
  }
  return out;
}

}  // namespace kinelift
