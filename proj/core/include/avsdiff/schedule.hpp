#pragma once

#include <cstdint>
#include <vector>

#include "avsdiff/common.hpp"

namespace avsdiff {

/// Diffusion noise schedule. Steps are indexed 1..K; alpha_bar[0] == 1 by
/// convention and alpha_bar is strictly decreasing.
class NoiseSchedule {
 public:
  /// Squared-cosine alpha-bar parameterization:
  ///   f(k) = cos^2(((k/K + offset) / (1 + offset)) * pi/2),
  ///   alpha_bar_k = f(k)/f(0),  beta_k = 1 - alpha_bar_k/alpha_bar_{k-1}
  /// with beta clamped to (1e-8, 0.999). The stored alpha_bar is rebuilt from
  /// the clamped betas so the arrays stay mutually consistent.
  static NoiseSchedule cosine(int steps, double offset = 0.008);

  /// Constant-beta schedule. Test-only helper: no published experiment uses
  /// it, it exists so step formulas can be checked by hand.
  static NoiseSchedule constant_beta_for_tests(int steps, double beta);

  int steps() const { return k_; }
  /// beta_k for k in [1, K].
  double beta(int k) const;
  /// alpha_k = 1 - beta_k for k in [1, K].
  double alpha(int k) const;
  /// alpha_bar_k for k in [0, K].
  double alpha_bar(int k) const;

  /// (sqrt(alpha_bar_k), sqrt(1 - alpha_bar_k)) for k in [0, K].
  std::pair<double, double> marginal_coeffs(int k) const;

  /// Serialized as u32 K followed by K little-endian f64 betas.
  void serialize(std::vector<std::uint8_t>& out) const;
  static NoiseSchedule deserialize(ByteReader& in);

  friend bool operator==(const NoiseSchedule& a, const NoiseSchedule& b) {
    return a.k_ == b.k_ && a.beta_ == b.beta_;
  }

 private:
  NoiseSchedule(int steps, std::vector<double> beta);

  int k_ = 0;
  std::vector<double> beta_;       // [K], index 0 is step 1
  std::vector<double> alpha_bar_;  // [K+1], index k is step k
};

}  // namespace avsdiff
