#pragma once

#include <cstdint>
#include <vector>

#include "ssmg/rng.hpp"
#include "ssmg/tensor.hpp"

namespace ssmg {

// Linear-beta diffusion schedule with cumulative alpha products kept in
// double precision.
struct NoiseSchedule {
    int steps = 1000;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    static NoiseSchedule linear(int steps = 1000, double beta_start = 1e-4,
                                double beta_end = 0.02);
};

// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

// eps_uncond + s * (eps_cond - eps_uncond).
Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, float s);

// Uniform timestep subsequence for DDIM, descending from steps-1. The i-th
// entry (ascending) is ((i+1)*T)/S - 1, so a single step lands on T-1.
std::vector<int> ddim_timesteps(int total_steps, int sample_steps);

// Standard normal tensor from the given stream.
Tensor randn(std::vector<int64_t> shape, Rng& rng);

}  // namespace ssmg
