#include "avsdiff/schedule.hpp"

#include <cmath>

namespace avsdiff {

namespace {
constexpr double kBetaMin = 1e-8;
constexpr double kBetaMax = 0.999;
}  // namespace

NoiseSchedule::NoiseSchedule(int steps, std::vector<double> beta)
    : k_(steps), beta_(std::move(beta)) {
  alpha_bar_.assign(static_cast<size_t>(k_) + 1, 1.0);
  for (int k = 1; k <= k_; ++k) {
    const double b = beta_[static_cast<size_t>(k - 1)];
    if (!(b > 0.0 && b < 1.0)) {
      throw ContractError("beta_" + std::to_string(k) + " = " + std::to_string(b) +
                          " outside (0,1)");
    }
    alpha_bar_[static_cast<size_t>(k)] = alpha_bar_[static_cast<size_t>(k - 1)] * (1.0 - b);
  }
}

NoiseSchedule NoiseSchedule::cosine(int steps, double offset) {
  if (steps < 2) throw ContractError("cosine schedule needs K >= 2, got " + std::to_string(steps));
  if (!(offset > 0.0)) throw ContractError("cosine schedule offset must be > 0");
  auto f = [steps, offset](int k) {
    const double t = ((static_cast<double>(k) / steps + offset) / (1.0 + offset)) * M_PI / 2.0;
    const double c = std::cos(t);
    return c * c;
  };
  const double f0 = f(0);
  std::vector<double> beta(static_cast<size_t>(steps));
  double prev_bar = 1.0;
  for (int k = 1; k <= steps; ++k) {
    const double bar = f(k) / f0;
    double b = 1.0 - bar / prev_bar;
    b = std::min(kBetaMax, std::max(kBetaMin, b));
    beta[static_cast<size_t>(k - 1)] = b;
    prev_bar = bar;
  }
  return NoiseSchedule(steps, std::move(beta));
}

NoiseSchedule NoiseSchedule::constant_beta_for_tests(int steps, double beta) {
  if (steps < 1) throw ContractError("constant schedule needs K >= 1");
  return NoiseSchedule(steps, std::vector<double>(static_cast<size_t>(steps), beta));
}

double NoiseSchedule::beta(int k) const {
  if (k < 1 || k > k_) {
    throw ContractError("beta index " + std::to_string(k) + " outside [1, " + std::to_string(k_) +
                        "]");
  }
  return beta_[static_cast<size_t>(k - 1)];
}

double NoiseSchedule::alpha(int k) const { return 1.0 - beta(k); }

double NoiseSchedule::alpha_bar(int k) const {
  if (k < 0 || k > k_) {
    throw ContractError("alpha_bar index " + std::to_string(k) + " outside [0, " +
                        std::to_string(k_) + "]");
  }
  return alpha_bar_[static_cast<size_t>(k)];
}

std::pair<double, double> NoiseSchedule::marginal_coeffs(int k) const {
  const double bar = alpha_bar(k);
  return {std::sqrt(bar), std::sqrt(1.0 - bar)};
}

void NoiseSchedule::serialize(std::vector<std::uint8_t>& out) const {
  put_u32(out, static_cast<std::uint32_t>(k_));
  for (double b : beta_) put_f64(out, b);
}

NoiseSchedule NoiseSchedule::deserialize(ByteReader& in) {
  const std::uint32_t k = in.u32();
  if (k < 1 || k > 1000000) throw FormatError("implausible schedule length " + std::to_string(k), in.pos);
  std::vector<double> beta(k);
  for (auto& b : beta) b = in.f64();
  return NoiseSchedule(static_cast<int>(k), std::move(beta));
}

}  // namespace avsdiff
