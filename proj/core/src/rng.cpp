#include "avsdiff/rng.hpp"

#include <cmath>

namespace avsdiff {

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

// splitmix64 finalizer; a bijective 64-bit mix.
inline std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

inline std::uint64_t stream_key(std::uint64_t seed, std::uint64_t stream_id) {
  return mix64(mix64(seed + kGolden) ^ mix64(stream_id * 0xda942042e4dd58b5ull + kGolden));
}

}  // namespace

RngStream RngStream::fork(std::uint64_t sub_id) const {
  return RngStream(seed_, mix64(stream_key(seed_, stream_id_) + sub_id * kGolden), 0);
}

std::uint64_t RngStream::next_u64() {
  const std::uint64_t v = mix64(stream_key(seed_, stream_id_) + (++counter_) * kGolden);
  return v;
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::uniform_index(std::uint64_t n) {
  // Rejection-free modulo is fine here: n is tiny relative to 2^64, the bias
  // is below 1e-15 and never observable in these tests.
  return next_u64() % n;
}

double RngStream::gauss() {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Tensor RngStream::gauss_tensor(std::vector<int> shape) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = gauss();
  return t;
}

Tensor RngStream::uniform_tensor(std::vector<int> shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * uniform();
  return t;
}

void RngStream::shuffle(std::vector<int>& items) {
  for (size_t i = items.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(uniform_index(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace avsdiff
