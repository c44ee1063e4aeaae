#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace pld {

// Per-block Bernoulli outcomes and the keep probabilities that produced them.
// ffn_keep is populated only when attention and FFN sublayers are gated
// independently; otherwise keep[l] switches the whole block.
struct GateVector {
  std::vector<std::uint8_t> keep;
  std::vector<std::uint8_t> ffn_keep;
  std::vector<double> prob;

  static GateVector all_on(std::size_t layers) {
    return GateVector{std::vector<std::uint8_t>(layers, 1), {}, std::vector<double>(layers, 1.0)};
  }

  std::size_t layers() const noexcept { return keep.size(); }
  bool per_sublayer() const noexcept { return !ffn_keep.empty(); }

  std::size_t kept() const noexcept {
    std::size_t n = 0;
    for (auto g : keep) n += g;
    return n;
  }
};

}  // namespace pld
