// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <set>

#include "doctest.h"

#include "mf/core.hpp"
#include "mf/flow.hpp"
#include "mf/io.hpp"

using namespace mf;

TEST_CASE("rng stream is a pure function of the seed") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next_u64();
        CHECK(x == b.next_u64());
        CHECK(x != c.next_u64());
    }
    CHECK(a.counter() == 100);
}

TEST_CASE("derive does not advance the parent and gives distinct streams") {
    Rng root(7);
    const Rng k1 = root.derive(1), k2 = root.derive(2), k1b = root.derive(1);
    CHECK(root.counter() == 0);
    Rng x = k1, y = k2, z = k1b;
    const auto vx = x.next_u64();
    CHECK(vx == z.next_u64());
    CHECK(vx != y.next_u64());
}

TEST_CASE("uniform and gauss moments") {
    Rng rng(3);
    const int n = 200000;
    double su = 0, sg = 0, sg2 = 0;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        su += u;
        const double g = rng.gauss();
        sg += g;
        sg2 += g * g;
    }
    CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
    CHECK(std::abs(sg / n) < 0.01);
    CHECK(sg2 / n == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("below stays in range and hits every value") {
    Rng rng(9);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 1000; ++i) {
        const auto v = rng.below(7);
        REQUIRE(v < 7);
        seen.insert(v);
    }
    CHECK(seen.size() == 7);
}

TEST_CASE("axpy and matvec") {
    Vec x(2), y(2);
    x << 1, 2;
    y << 10, 20;
    const Vec r = axpy(3.0, x, y);
    CHECK(r[0] == 13.0);
    CHECK(r[1] == 26.0);
    Mat m(2, 2);
    m << 1, 2, 3, 4;
    const Vec mv = matvec(m, x);
    CHECK(mv[0] == 5.0);
    CHECK(mv[1] == 11.0);
    CHECK_THROWS_AS(axpy(1.0, x, Vec(3)), ContractError);
    CHECK_THROWS_AS(matvec(m, Vec(3)), ContractError);
}

TEST_CASE("gauss_sample length") {
    Rng rng(1);
    CHECK(gauss_sample(rng, 5).size() == 5);
    CHECK_THROWS(gauss_sample(rng, 0));
}

TEST_CASE("sha256 known digests") {
    CHECK(sha256_hex(std::string("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex(std::string()) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("format_double round-trips") {
    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        const double x = rng.gauss() * std::pow(10.0, static_cast<double>(rng.below(20)) - 10.0);
        CHECK(std::stod(format_double(x)) == x);
    }
    CHECK(format_double(0.1) == "0.1");
}

TEST_CASE("linear path endpoints and velocity") {
    const FlowPath path;
    Rng rng(11);
    const Vec x = gauss_sample(rng, 4), e = gauss_sample(rng, 4);
    CHECK(interpolate(path, x, e, 0.0) == x);
    CHECK(interpolate(path, x, e, 1.0) == e);
    const Vec mid = interpolate(path, x, e, 0.25);
    CHECK((mid - (0.75 * x + 0.25 * e)).norm() < 1e-15);
    const Vec v = cond_velocity(path, x, e);
    CHECK(v == Vec(e - x));
    // finite difference of the path equals the velocity
    const double h = 1e-6;
    const Vec fd = (interpolate(path, x, e, 0.5 + h) - interpolate(path, x, e, 0.5 - h)) / (2 * h);
    CHECK((fd - v).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("path contract violations") {
    const FlowPath path;
    const Vec x = Vec::Zero(2), e = Vec::Ones(3);
    CHECK_THROWS_AS(interpolate(path, x, e, 0.5), ContractError);
    CHECK_THROWS_AS(interpolate(path, x, Vec::Ones(2), 1.5), ContractError);
    CHECK_THROWS_AS(interpolate(path, x, Vec::Ones(2), -0.1), ContractError);
    CHECK_THROWS_AS(cond_velocity(path, x, e), ContractError);
}
