#pragma once

#include <cmath>
#include <cstdint>

#include <Eigen/Core>

namespace gmdiff {

// Philox4x32-10 counter-based generator. A stream is keyed by
// (seed, trajectory id, step); draws within the stream advance only a
// local counter, so results do not depend on which worker evaluates
// the stream or in what order streams are consumed.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t stream_id, std::uint32_t step)
      : key0_(static_cast<std::uint32_t>(seed)),
        key1_(static_cast<std::uint32_t>(seed >> 32)),
        ctr0_(static_cast<std::uint32_t>(stream_id)),
        ctr1_(static_cast<std::uint32_t>(stream_id >> 32)),
        ctr2_(step) {}

  // Uniform on (0, 1] (never 0, safe under log()).
  double uniform() {
    const std::uint64_t bits = next_u64();
    return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  void fill_normal(Eigen::Ref<Eigen::VectorXd> out) {
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] = normal();
  }

  std::uint64_t next_u64() {
    if (block_pos_ >= 4) refill();
    const std::uint32_t lo = block_[block_pos_++];
    const std::uint32_t hi = block_[block_pos_++];
    return (static_cast<std::uint64_t>(hi) << 32) | lo;
  }

 private:
  void refill() {
    std::uint32_t c0 = ctr0_, c1 = ctr1_, c2 = ctr2_, c3 = slot_++;
    std::uint32_t k0 = key0_, k1 = key1_;
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = 0xD2511F53ull * c0;
      const std::uint64_t p1 = 0xCD9E8D57ull * c2;
      const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
      const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
      const std::uint32_t n0 = hi1 ^ c1 ^ k0;
      const std::uint32_t n2 = hi0 ^ c3 ^ k1;
      c0 = n0;
      c1 = lo1;
      c2 = n2;
      c3 = lo0;
      k0 += 0x9E3779B9u;
      k1 += 0xBB67AE85u;
    }
    block_[0] = c0;
    block_[1] = c1;
    block_[2] = c2;
    block_[3] = c3;
    block_pos_ = 0;
  }

  std::uint32_t key0_, key1_;
  std::uint32_t ctr0_, ctr1_, ctr2_;
  std::uint32_t slot_ = 0;
  std::uint32_t block_[4] = {0, 0, 0, 0};
  int block_pos_ = 4;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Step ids reserved for draws that are not tied to a schedule index.
// Schedule indices stay below 2^24, so the high bit is free.
inline constexpr std::uint32_t kStreamInit = 0x80000000u;
inline constexpr std::uint32_t kStreamAux0 = 0x80000001u;
inline constexpr std::uint32_t kStreamAux1 = 0x80000002u;

}  // namespace gmdiff
