#pragma once

#include <cstdint>

namespace didi {

/// Inference-cost counters. Forward counts are per sample: a batched call
/// over B columns adds B.
struct CostAudit {
  std::uint64_t policy_forwards = 0;
  std::uint64_t eps_forwards = 0;
  std::uint64_t guidance_evals = 0;
  double wall_seconds = 0.0;

  CostAudit operator-(const CostAudit& o) const {
    return {policy_forwards - o.policy_forwards, eps_forwards - o.eps_forwards, guidance_evals - o.guidance_evals,
            wall_seconds - o.wall_seconds};
  }
};

}  // namespace didi
