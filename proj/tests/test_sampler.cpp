// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"

#include "mf/sampler.hpp"

using namespace mf;
using namespace mf::testing;

TEST_CASE("analytic singleton field is recovered exactly at every nfe") {
    Vec x0(3);
    x0 << 0.3, -0.7, 1.25;
    const SingletonField field(x0);
    Rng rng(1);
    for (int rep = 0; rep < 20; ++rep) {
        const Vec a1 = gauss_sample(rng, 3);
        Vec one = a1 - field.eval(a1, Vec(0), 0.0, 1.0);
        CHECK((one - x0).cwiseAbs().maxCoeff() < 1e-12);
    }
    for (std::size_t nfe = 1; nfe <= 10; ++nfe) {
        Rng r(nfe);
        CHECK((sample_multi_step(field, Vec(0), nfe, r) - x0).cwiseAbs().maxCoeff() < 1e-12);
        Rng r2(nfe);
        CHECK((sample_euler_fm(field, Vec(0), nfe, r2) - x0).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("one-step and single-interval multi-step agree") {
    Rng a(2);
    const MlpNet net = random_net(shape(2, 1, {8}), a);
    Rng c(3), d(3);
    const Vec cond = Vec::Ones(1);
    CHECK(sample_one_step(net, cond, c) == sample_multi_step(net, cond, 1, d));
}

TEST_CASE("zero field returns the initial noise") {
    const ZeroField z(4, 0);
    Rng a(4), b(4);
    const Vec noise = gauss_sample(b, 4);
    CHECK(sample_multi_step(z, Vec(0), 3, a) == noise);
}

TEST_CASE("euler on a two-point set converges to the data") {
    Vec p(2), q(2);
    p << 1.0, 0.0;
    q << -1.0, 0.0;
    const PointSetVelocityField field({p, q});
    auto err = [&](std::size_t nfe) {
        double total = 0.0;
        for (std::uint64_t s = 0; s < 200; ++s) {
            Rng rng(s);
            const Vec x = sample_euler_fm(field, Vec(0), nfe, rng);
            total += std::min((x - p).norm(), (x - q).norm());
        }
        return total / 200.0;
    };
    const double e1 = err(1), e4 = err(4), e16 = err(16), e64 = err(64);
    CHECK(e4 < e1);
    CHECK(e16 < e4);
    CHECK(e64 <= e16);
    // once the posterior is one-hot the last step lands on the point
    CHECK(e64 < 1e-9);
    // nfe = 1 lands on the posterior mean, near the origin
    CHECK(e1 > 0.5);
}

TEST_CASE("euler_fm queries the field at r = t") {
    struct Probe final : VectorField {
        mutable bool ok = true;
        std::size_t z_dim() const override { return 1; }
        std::size_t cond_dim() const override { return 0; }
        Vec eval(const Vec& z, const Vec&, double r, double t) const override {
            ok = ok && r == t;
            return Vec::Zero(z.size());
        }
    } probe;
    Rng rng(5);
    sample_euler_fm(probe, Vec(0), 7, rng);
    CHECK(probe.ok);
}

TEST_CASE("sample dispatch and argument checks") {
    const ZeroField z(2, 1);
    Rng rng(6);
    CHECK_THROWS_AS(sample(z, Vec::Zero(1), SampleConfig{0, SampleMode::meanflow, 0}, rng), ContractError);
    CHECK_THROWS_AS(sample(z, Vec::Zero(2), SampleConfig{1, SampleMode::meanflow, 0}, rng), ContractError);
    CHECK(to_string(SampleMode::euler_fm) == "euler_fm");
    CHECK(sample_mode_from_string("meanflow") == SampleMode::meanflow);
    CHECK_THROWS_AS(sample_mode_from_string("ddim"), ConfigError);
}

TEST_CASE("generate_chunk reshapes row-major") {
    const ZeroField z(6, 0);
    Rng a(7), b(7);
    const Vec flat = gauss_sample(b, 6);
    const ActionChunk c = generate_chunk(z, Vec(0), SampleConfig{1, SampleMode::meanflow, 0}, 3, a);
    CHECK(c.horizon() == 2);
    CHECK(c.act_dim() == 3);
    CHECK(c.actions(0, 2) == flat[2]);
    CHECK(c.actions(1, 0) == flat[3]);
    Rng d(8);
    CHECK_THROWS_AS(generate_chunk(z, Vec(0), SampleConfig{}, 4, d), ContractError);
}
