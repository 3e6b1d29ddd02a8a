#pragma once

#include <functional>

#include "avsdiff/autodiff.hpp"
#include "avsdiff/rng.hpp"
#include "avsdiff/schedule.hpp"
#include "avsdiff/tensor.hpp"

namespace avsdiff {

enum class SamplerMode { kAncestral, kDdim };

/// z_k = sqrt(alpha_bar_k) * z0 + sqrt(1 - alpha_bar_k) * eps, k in [1, K].
Tensor q_sample(const Tensor& z0, int k, const Tensor& eps, const NoiseSchedule& s);

/// Tape variant of q_sample with a per-row timestep (one k per batch row).
NodeId q_sample_node(Tape& tape, NodeId z0, const std::vector<int>& ks, const Tensor& eps,
                     const NoiseSchedule& s);

/// Mean squared error between predicted and actual noise.
double simple_loss(const Tensor& eps_hat, const Tensor& eps);

/// One reverse ancestral step with fixed variance beta_k. No noise is
/// injected on the final step (k == 1).
Tensor ancestral_step(const Tensor& zk, const Tensor& eps_hat, int k, const NoiseSchedule& s,
                      RngStream& rng);

/// Deterministic DDIM jump k -> k_prev (eta = 0): predict z0 from eps_hat,
/// then re-noise analytically to k_prev.
Tensor ddim_step(const Tensor& zk, const Tensor& eps_hat, int k, int k_prev,
                 const NoiseSchedule& s);

/// Evaluation points for a `steps`-step DDIM chain over a K-step schedule:
/// strictly decreasing, starts at K, the implied final jump lands on 0.
std::vector<int> ddim_timesteps(int total_steps, int sample_steps);

using NoiseFn = std::function<Tensor(const Tensor& z, int k)>;

/// Full reverse chain from z_K ~ N(0, I). Ancestral mode requires
/// steps == K; DDIM uses the uniform-stride subsequence above.
Tensor sample(const NoiseFn& noise_fn, const std::vector<int>& latent_shape, int steps,
              const NoiseSchedule& s, RngStream& rng, SamplerMode mode);

}  // namespace avsdiff
