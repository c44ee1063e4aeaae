#pragma once

#include <array>
#include <cstdint>

namespace pld {

// Philox4x32-10 counter-based generator (Salmon et al., SC'11). Every draw is
// a pure function of (key, counter), so results do not depend on the order in
// which draws are requested.
class Philox {
 public:
  using Block = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Block generate(Block counter, Key key);

  // Keyed by a 64-bit seed; the counter is (index, stream).
  explicit Philox(std::uint64_t seed) noexcept
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

  Block block(std::uint64_t stream, std::uint64_t index) const;

  // Uniform in [0, 1) with 32-bit resolution; lane selects one of the four
  // words produced for a counter.
  double uniform(std::uint64_t stream, std::uint64_t index, unsigned lane = 0) const;

 private:
  Key key_;
};

// Fixed stream tags so unrelated consumers of one seed never share counters.
namespace rng_stream {
inline constexpr std::uint64_t kGates = 0x01ULL << 56;
inline constexpr std::uint64_t kBatches = 0x02ULL << 56;
inline constexpr std::uint64_t kMasks = 0x03ULL << 56;
inline constexpr std::uint64_t kDropout = 0x04ULL << 56;
inline constexpr std::uint64_t kValidation = 0x05ULL << 56;
inline constexpr std::uint64_t kLesion = 0x06ULL << 56;

// Packs a tag with a step (low 40 bits) and a small site id (16 bits).
constexpr std::uint64_t make(std::uint64_t tag, std::uint64_t step, std::uint64_t site = 0) {
  return tag | ((site & 0xFFFFULL) << 40) | (step & 0xFFFFFFFFFFULL);
}
}  // namespace rng_stream

inline double u32_to_unit(std::uint32_t x) { return static_cast<double>(x) * 0x1.0p-32; }

}  // namespace pld
