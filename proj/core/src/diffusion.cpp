#include "avsdiff/diffusion.hpp"

#include <cmath>

namespace avsdiff {

Tensor q_sample(const Tensor& z0, int k, const Tensor& eps, const NoiseSchedule& s) {
  require_same_shape(z0, eps, "q_sample");
  if (k < 1 || k > s.steps()) {
    throw ContractError("q_sample: k = " + std::to_string(k) + " outside [1, " +
                        std::to_string(s.steps()) + "]");
  }
  const auto [a, b] = s.marginal_coeffs(k);
  Tensor out = z0;
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = a * out[i] + b * eps[i];
  return out;
}

NodeId q_sample_node(Tape& tape, NodeId z0, const std::vector<int>& ks, const Tensor& eps,
                     const NoiseSchedule& s) {
  const Tensor& v = tape.value(z0);
  require_same_shape(v, eps, "q_sample");
  if (v.rank() != 2 || v.dim(0) != static_cast<int>(ks.size())) {
    throw DimensionError("q_sample: latent " + shape_to_string(v.shape()) + " vs " +
                         std::to_string(ks.size()) + " timesteps");
  }
  const int b = v.dim(0), d = v.dim(1);
  Tensor scale({b, d});
  Tensor noise_term({b, d});
  for (int i = 0; i < b; ++i) {
    const auto [sa, sb] = s.marginal_coeffs(ks[static_cast<size_t>(i)]);
    if (ks[static_cast<size_t>(i)] < 1) {
      throw ContractError("q_sample: k must be >= 1");
    }
    for (int j = 0; j < d; ++j) {
      scale[static_cast<std::int64_t>(i) * d + j] = sa;
      noise_term[static_cast<std::int64_t>(i) * d + j] = sb * eps[static_cast<std::int64_t>(i) * d + j];
    }
  }
  return tape.add(tape.cmul(z0, std::move(scale)), tape.constant(std::move(noise_term)));
}

double simple_loss(const Tensor& eps_hat, const Tensor& eps) {
  require_same_shape(eps_hat, eps, "simple_loss");
  if (eps.size() == 0) throw ContractError("simple_loss of empty tensors");
  double acc = 0.0;
  for (std::int64_t i = 0; i < eps.size(); ++i) {
    const double d = eps[i] - eps_hat[i];
    acc += d * d;
  }
  return acc / static_cast<double>(eps.size());
}

Tensor ancestral_step(const Tensor& zk, const Tensor& eps_hat, int k, const NoiseSchedule& s,
                      RngStream& rng) {
  require_same_shape(zk, eps_hat, "ancestral_step");
  if (k < 1 || k > s.steps()) {
    throw ContractError("ancestral_step: k = " + std::to_string(k) + " outside [1, " +
                        std::to_string(s.steps()) + "]");
  }
  const double beta = s.beta(k);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(k));
  const double eps_coeff = beta / std::sqrt(1.0 - s.alpha_bar(k));
  const double sigma = std::sqrt(beta);
  Tensor out = zk;
  for (std::int64_t i = 0; i < out.size(); ++i) {
    out[i] = inv_sqrt_alpha * (out[i] - eps_coeff * eps_hat[i]);
    if (k > 1) out[i] += sigma * rng.gauss();
  }
  return out;
}

Tensor ddim_step(const Tensor& zk, const Tensor& eps_hat, int k, int k_prev,
                 const NoiseSchedule& s) {
  require_same_shape(zk, eps_hat, "ddim_step");
  if (k_prev < 0 || k > s.steps() || k_prev >= k) {
    throw ContractError("ddim_step: need 0 <= k_prev < k <= K, got k = " + std::to_string(k) +
                        ", k_prev = " + std::to_string(k_prev));
  }
  const auto [a_k, b_k] = s.marginal_coeffs(k);
  const auto [a_p, b_p] = s.marginal_coeffs(k_prev);
  Tensor out = zk;
  for (std::int64_t i = 0; i < out.size(); ++i) {
    const double z0_hat = (out[i] - b_k * eps_hat[i]) / a_k;
    out[i] = a_p * z0_hat + b_p * eps_hat[i];
  }
  return out;
}

std::vector<int> ddim_timesteps(int total_steps, int sample_steps) {
  if (sample_steps < 1 || sample_steps > total_steps) {
    throw ContractError("ddim_timesteps: need 1 <= steps <= K, got steps = " +
                        std::to_string(sample_steps) + ", K = " + std::to_string(total_steps));
  }
  std::vector<int> ks;
  ks.reserve(static_cast<size_t>(sample_steps));
  for (int i = 0; i < sample_steps; ++i) {
    const int k = total_steps - static_cast<int>((static_cast<std::int64_t>(i) * total_steps) /
                                                 sample_steps);
    if (ks.empty() || k < ks.back()) ks.push_back(k);
  }
  return ks;
}

Tensor sample(const NoiseFn& noise_fn, const std::vector<int>& latent_shape, int steps,
              const NoiseSchedule& s, RngStream& rng, SamplerMode mode) {
  if (steps > s.steps()) {
    throw ContractError("sample: steps = " + std::to_string(steps) + " exceeds K = " +
                        std::to_string(s.steps()));
  }
  if (mode == SamplerMode::kAncestral && steps != s.steps()) {
    throw ContractError("sample: ancestral mode requires steps == K");
  }
  Tensor z = rng.gauss_tensor(latent_shape);
  if (mode == SamplerMode::kAncestral) {
    for (int k = s.steps(); k >= 1; --k) {
      z = ancestral_step(z, noise_fn(z, k), k, s, rng);
    }
    return z;
  }
  const std::vector<int> ks = ddim_timesteps(s.steps(), steps);
  for (size_t i = 0; i < ks.size(); ++i) {
    const int k = ks[i];
    const int k_prev = i + 1 < ks.size() ? ks[i + 1] : 0;
    z = ddim_step(z, noise_fn(z, k), k, k_prev, s);
  }
  return z;
}

}  // namespace avsdiff
