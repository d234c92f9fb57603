#include "ssmg/schedule.hpp"

#include <cmath>

#include "ssmg/errors.hpp"

namespace ssmg {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 2) throw ValueError("schedule: need at least 2 steps");
    NoiseSchedule s;
    s.steps = steps;
    s.betas.resize(static_cast<size_t>(steps));
    s.alphas.resize(static_cast<size_t>(steps));
    s.alpha_bars.resize(static_cast<size_t>(steps));
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        double b = beta_start + (beta_end - beta_start) * t / (steps - 1);
        s.betas[static_cast<size_t>(t)] = b;
        s.alphas[static_cast<size_t>(t)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bars[static_cast<size_t>(t)] = prod;
    }
    return s;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (t < 0 || t >= sched.steps) throw RangeError("q_sample: timestep out of range");
    x0.check_shape(eps.shape, "q_sample");
    double abar = sched.alpha_bars[static_cast<size_t>(t)];
    float ca = static_cast<float>(std::sqrt(abar));
    float ce = static_cast<float>(std::sqrt(1.0 - abar));
    Tensor out(x0.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.data[static_cast<size_t>(i)] = ca * x0.data[static_cast<size_t>(i)] +
                                           ce * eps.data[static_cast<size_t>(i)];
    return out;
}

Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, float s) {
    eps_uncond.check_shape(eps_cond.shape, "cfg_combine");
    Tensor out(eps_uncond.shape);
    for (int64_t i = 0; i < out.numel(); ++i) {
        float u = eps_uncond.data[static_cast<size_t>(i)];
        float c = eps_cond.data[static_cast<size_t>(i)];
        out.data[static_cast<size_t>(i)] = u + s * (c - u);
    }
    return out;
}

std::vector<int> ddim_timesteps(int total_steps, int sample_steps) {
    if (sample_steps < 1) throw RangeError("ddim: need at least one step");
    if (sample_steps > total_steps) throw RangeError("ddim: more sample steps than schedule steps");
    std::vector<int> taus(static_cast<size_t>(sample_steps));
    for (int i = 0; i < sample_steps; ++i)
        taus[static_cast<size_t>(i)] =
            static_cast<int>((static_cast<int64_t>(i + 1) * total_steps) / sample_steps) - 1;
    return taus;
}

Tensor randn(std::vector<int64_t> shape, Rng& rng) {
    Tensor out(std::move(shape));
    for (auto& v : out.data) v = static_cast<float>(rng.gauss());
    return out;
}

}  // namespace ssmg
