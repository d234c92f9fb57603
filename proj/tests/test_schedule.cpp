#include <doctest.h>

#include <cmath>

#include "ssmg/schedule.hpp"
#include "testutil.hpp"

using namespace ssmg;

TEST_CASE("linear schedule endpoints, monotonicity, and products") {
    NoiseSchedule s = NoiseSchedule::linear();
    REQUIRE(s.steps == 1000);
    REQUIRE(s.betas.size() == 1000);
    CHECK(s.betas.front() == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.betas.back() == doctest::Approx(0.02).epsilon(1e-12));

    double prod = 1.0;
    for (int t = 0; t < s.steps; ++t) {
        size_t i = static_cast<size_t>(t);
        CHECK(s.alphas[i] == doctest::Approx(1.0 - s.betas[i]).epsilon(1e-15));
        prod *= s.alphas[i];
        CHECK(s.alpha_bars[i] == doctest::Approx(prod).epsilon(1e-12));
        if (t > 0) {
            CHECK(s.betas[i] > s.betas[i - 1]);
            CHECK(s.alpha_bars[i] < s.alpha_bars[i - 1]);
        }
    }
    CHECK(s.alpha_bars.front() == doctest::Approx(1.0 - 1e-4).epsilon(1e-12));
    CHECK(s.alpha_bars.back() > 0.0);
    CHECK(s.alpha_bars.back() < 1e-4);  // essentially pure noise at the end

    CHECK_THROWS_AS(NoiseSchedule::linear(1), ValueError);
}

TEST_CASE("q_sample applies the closed-form forward noising") {
    NoiseSchedule s = NoiseSchedule::linear(10, 0.1, 0.2);
    Tensor x0({2, 2});
    Tensor eps({2, 2});
    x0.data = {1.0f, -2.0f, 0.5f, 3.0f};
    eps.data = {0.1f, 0.2f, -0.3f, 0.4f};

    // abar_2 = (1-0.1)(1-0.1111...)(1-0.1222...)
    double abar = (1 - 0.1) * (1 - (0.1 + 0.1 / 9)) * (1 - (0.1 + 0.2 / 9));
    CHECK(s.alpha_bars[2] == doctest::Approx(abar).epsilon(1e-12));
    Tensor zt = q_sample(x0, 2, eps, s);
    for (int64_t i = 0; i < 4; ++i) {
        float want = static_cast<float>(std::sqrt(abar)) * x0.data[static_cast<size_t>(i)] +
                     static_cast<float>(std::sqrt(1 - abar)) * eps.data[static_cast<size_t>(i)];
        CHECK(zt.data[static_cast<size_t>(i)] == want);
    }
    CHECK_THROWS_AS(q_sample(x0, 10, eps, s), RangeError);
    CHECK_THROWS_AS(q_sample(x0, -1, eps, s), RangeError);
}

TEST_CASE("cfg_combine interpolates and extrapolates around the conditional") {
    Tensor u({3}), c({3});
    u.data = {1.0f, 0.0f, -1.0f};
    c.data = {2.0f, 0.0f, 1.0f};
    Tensor s0 = cfg_combine(u, c, 0.0f);
    CHECK(s0.data == u.data);
    Tensor s1 = cfg_combine(u, c, 1.0f);
    CHECK(s1.data == c.data);
    Tensor s9 = cfg_combine(u, c, 9.0f);
    CHECK(s9.data[0] == 1.0f + 9.0f * 1.0f);
    CHECK(s9.data[1] == 0.0f);
    CHECK(s9.data[2] == -1.0f + 9.0f * 2.0f);
}

TEST_CASE("ddim timesteps are uniform, descending-capable, and end on T-1") {
    CHECK(ddim_timesteps(1000, 1) == std::vector<int>{999});
    std::vector<int> t20 = ddim_timesteps(1000, 20);
    REQUIRE(t20.size() == 20);
    for (int i = 0; i < 20; ++i) CHECK(t20[static_cast<size_t>(i)] == (i + 1) * 50 - 1);
    CHECK(t20.back() == 999);

    std::vector<int> full = ddim_timesteps(10, 10);
    for (int i = 0; i < 10; ++i) CHECK(full[static_cast<size_t>(i)] == i);

    // Uneven split still lands on the last step and stays strictly increasing.
    std::vector<int> t7 = ddim_timesteps(1000, 7);
    CHECK(t7.back() == 999);
    for (size_t i = 1; i < t7.size(); ++i) CHECK(t7[i] > t7[i - 1]);

    CHECK_THROWS_AS(ddim_timesteps(1000, 0), RangeError);
    CHECK_THROWS_AS(ddim_timesteps(10, 11), RangeError);
}

TEST_CASE("randn is deterministic per stream") {
    Rng a(5), b(5), c(6);
    Tensor ta = randn({4, 4}, a);
    Tensor tb = randn({4, 4}, b);
    Tensor tc = randn({4, 4}, c);
    CHECK(ta.data == tb.data);
    CHECK(ta.data != tc.data);
}
