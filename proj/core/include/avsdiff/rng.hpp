#pragma once

#include <cstdint>
#include <vector>

#include "avsdiff/tensor.hpp"

namespace avsdiff {

/// Counter-based random stream. Each draw is a pure function of
/// (seed, stream_id, counter), so forked streams are independent and a
/// stream's whole history is reproducible from its three integers.
class RngStream {
 public:
  RngStream() = default;
  RngStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t counter = 0)
      : seed_(seed), stream_id_(stream_id), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }

  /// Independent stream; does not advance this stream's counter.
  RngStream fork(std::uint64_t sub_id) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal (Box-Muller; two uniforms per draw).
  double gauss();

  Tensor gauss_tensor(std::vector<int> shape);
  Tensor uniform_tensor(std::vector<int> shape, double lo, double hi);

  /// In-place Fisher-Yates.
  void shuffle(std::vector<int>& items);

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace avsdiff
