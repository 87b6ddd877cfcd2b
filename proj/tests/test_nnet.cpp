// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"

#include "mf/io.hpp"
#include "mf/nnet.hpp"

using namespace mf;
using namespace mf::testing;

TEST_CASE("time_embed values") {
    const Vec e0 = time_embed(0.0, 4);
    CHECK(e0.size() == 4);
    CHECK(e0[0] == 0.0);
    CHECK(e0[1] == 1.0);
    CHECK(e0[2] == 0.0);
    CHECK(e0[3] == 1.0);
    const Vec q = time_embed(0.25, 2);
    CHECK(q[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(std::abs(q[1]) < 1e-15);
    // frequency doubles per pair
    const Vec e = time_embed(0.1, 6);
    for (int k = 0; k < 3; ++k) {
        const double w = 2.0 * std::numbers::pi * std::pow(2.0, k);
        CHECK(e[2 * k] == doctest::Approx(std::sin(w * 0.1)));
        CHECK(e[2 * k + 1] == doctest::Approx(std::cos(w * 0.1)));
    }
    CHECK(time_embed(0.37, 8) == time_embed(0.37, 8));
}

TEST_CASE("time_embed rejects bad dims") {
    CHECK_THROWS_AS(time_embed(0.5, 3), ConfigError);
    CHECK_THROWS_AS(time_embed(0.5, 0), ConfigError);
}

TEST_CASE("layer dims chain and in_dim counts both embeddings") {
    Rng rng(1);
    const MlpNet net = MlpNet::init(shape(6, 3, {16, 8}, 4), rng);
    CHECK(net.in_dim() == 6 + 3 + 2 * 4);
    CHECK(net.out_dim() == 6);
    const auto& L = net.layers();
    REQUIRE(L.size() == 3);
    CHECK(L[0].weight.cols() == static_cast<Eigen::Index>(net.in_dim()));
    for (std::size_t i = 1; i < L.size(); ++i) CHECK(L[i].weight.cols() == L[i - 1].weight.rows());
    CHECK(L.back().weight.rows() == 6);
    CHECK(net.parameter_count() == (17 * 16 + 16) + (16 * 8 + 8) + (8 * 6 + 6));
}

TEST_CASE("glorot bounds and zero output layer give a zero field") {
    Rng rng(2);
    const MlpNet net = MlpNet::init(shape(3, 2, {32, 32}), rng);
    const auto& L = net.layers();
    for (std::size_t i = 0; i + 1 < L.size(); ++i) {
        const double bound = std::sqrt(6.0 / static_cast<double>(L[i].weight.rows() + L[i].weight.cols()));
        CHECK(L[i].weight.cwiseAbs().maxCoeff() <= bound);
        CHECK(L[i].bias.isZero());
    }
    CHECK(L.back().weight.isZero());
    Rng r2(3);
    for (int k = 0; k < 10; ++k) CHECK(forward(net, random_input(net, r2)).isZero());
}

TEST_CASE("forward is deterministic across identically seeded nets") {
    Rng a(5), b(5);
    const MlpNet n1 = random_net(shape(4, 2, {16}), a), n2 = random_net(shape(4, 2, {16}), b);
    Rng ri(6);
    const NetInput in = random_input(n1, ri);
    CHECK(forward(n1, in) == forward(n2, in));
    CHECK(forward(n1, in) == forward(n1, in));
}

TEST_CASE("hand-built linear net returns z") {
    NetShape s = shape(3, 1, {}, 2);
    Layer l;
    l.weight = Mat::Zero(3, static_cast<Eigen::Index>(s.in_dim()));
    l.weight.leftCols(3) = Mat::Identity(3, 3);
    l.bias = Vec::Zero(3);
    const MlpNet net(s, {l});
    Vec z(3);
    z << 0.3, -1.2, 2.5;
    Vec c(1);
    c << 9.0;
    CHECK(forward(net, {z, c, 0.2, 0.7}) == z);
}

TEST_CASE("forward rejects mismatched inputs") {
    Rng rng(7);
    const MlpNet net = random_net(shape(3, 2, {8}), rng);
    CHECK_THROWS_AS(forward(net, {Vec::Zero(2), Vec::Zero(2), 0.1, 0.5}), ContractError);
    CHECK_THROWS_AS(forward(net, {Vec::Zero(3), Vec::Zero(1), 0.1, 0.5}), ContractError);
    CHECK_THROWS_AS(backward(net, {Vec::Zero(3), Vec::Zero(2), 0.1, 0.5}, Vec::Zero(2)), ContractError);
    CHECK_THROWS_AS(jvp(net, {Vec::Zero(3), Vec::Zero(2), 0.1, 0.5}, Vec::Zero(2), 0, 1), ContractError);
}

TEST_CASE("batched forward matches per-sample forward") {
    Rng rng(8);
    const MlpNet net = random_net(shape(4, 3, {12, 12}, 4, Activation::gelu), rng);
    BatchInput b;
    const int n = 7;
    b.z.resize(n, 4);
    b.cond.resize(n, 3);
    b.r.resize(n);
    b.t.resize(n);
    std::vector<NetInput> ins;
    for (int i = 0; i < n; ++i) {
        ins.push_back(random_input(net, rng));
        b.z.row(i) = ins.back().z.transpose();
        b.cond.row(i) = ins.back().cond.transpose();
        b.r[i] = ins.back().r;
        b.t[i] = ins.back().t;
    }
    const Mat out = forward_batch(net, b);
    for (int i = 0; i < n; ++i) CHECK((out.row(i).transpose() - forward(net, ins[i])).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("conditioning changes the output") {
    Rng rng(9);
    const MlpNet net = random_net(shape(2, 3, {16}), rng);
    NetInput in = random_input(net, rng);
    const Vec a = forward(net, in);
    in.cond[1] += 0.5;
    CHECK((forward(net, in) - a).norm() > 1e-6);
}

TEST_CASE("the net distinguishes t = 0 from t = 1") {
    Rng rng(10);
    const MlpNet net = random_net(shape(2, 0, {16}), rng);
    const Vec z = gauss_sample(rng, 2);
    CHECK((forward(net, {z, Vec(0), 0.0, 0.0}) - forward(net, {z, Vec(0), 1.0, 1.0})).norm() > 1e-6);
    CHECK((forward(net, {z, Vec(0), 0.0, 1.0}) - forward(net, {z, Vec(0), 1.0, 1.0})).norm() > 1e-6);
}

namespace {

// Central difference of <forward, g> in every parameter.
void check_backward_fd(Activation act) {
    Rng rng(11);
    MlpNet net = random_net(shape(2, 0, {16}, 2, act), rng);
    const NetInput in = random_input(net, rng);
    const Vec g = gauss_sample(rng, 2);
    const GradBuffer grad = backward(net, in, g);
    const Vec flat = grad.flatten();
    const double h = 1e-5;
    Eigen::Index k = 0;
    double worst = 0.0;
    for (auto& l : net.layers()) {
        for (Eigen::Index i = 0; i < l.weight.size(); ++i, ++k) {
            double& p = l.weight.data()[i];
            const double keep = p;
            p = keep + h;
            const double up = forward(net, in).dot(g);
            p = keep - h;
            const double dn = forward(net, in).dot(g);
            p = keep;
            worst = std::max(worst, rel_err(flat[k], (up - dn) / (2 * h)));
        }
        for (Eigen::Index i = 0; i < l.bias.size(); ++i, ++k) {
            double& p = l.bias[i];
            const double keep = p;
            p = keep + h;
            const double up = forward(net, in).dot(g);
            p = keep - h;
            const double dn = forward(net, in).dot(g);
            p = keep;
            worst = std::max(worst, rel_err(flat[k], (up - dn) / (2 * h)));
        }
    }
    CHECK(k == static_cast<Eigen::Index>(net.parameter_count()));
    CHECK(worst < 1e-5);
}

}  // namespace

TEST_CASE("backward matches finite differences (tanh)") { check_backward_fd(Activation::tanh); }
TEST_CASE("backward matches finite differences (gelu)") { check_backward_fd(Activation::gelu); }

TEST_CASE("backward is linear in the output gradient") {
    Rng rng(12);
    const MlpNet net = random_net(shape(3, 2, {10, 10}), rng);
    const NetInput in = random_input(net, rng);
    const Vec g1 = gauss_sample(rng, 3), g2 = gauss_sample(rng, 3);
    const Vec sum = backward(net, in, g1 + g2).flatten();
    const Vec parts = backward(net, in, g1).flatten() + backward(net, in, g2).flatten();
    CHECK((sum - parts).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(backward(net, in, Vec::Zero(3)).flatten().isZero());
}

TEST_CASE("backward_batch sums per-sample gradients") {
    Rng rng(13);
    const MlpNet net = random_net(shape(2, 1, {8}), rng);
    BatchInput b;
    b.z.resize(3, 2);
    b.cond.resize(3, 1);
    b.r.resize(3);
    b.t.resize(3);
    Mat og(3, 2);
    Vec expect = Vec::Zero(static_cast<Eigen::Index>(net.parameter_count()));
    for (int i = 0; i < 3; ++i) {
        const NetInput in = random_input(net, rng);
        b.z.row(i) = in.z.transpose();
        b.cond.row(i) = in.cond.transpose();
        b.r[i] = in.r;
        b.t[i] = in.t;
        const Vec g = gauss_sample(rng, 2);
        og.row(i) = g.transpose();
        expect += backward(net, in, g).flatten();
    }
    ForwardCache cache;
    forward_batch(net, b, &cache);
    CHECK((backward_batch(net, cache, og).flatten() - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("jvp matches directional finite differences") {
    Rng rng(14);
    for (Activation act : {Activation::tanh, Activation::gelu}) {
        const MlpNet net = random_net(shape(2, 2, {16, 16}, 4, act), rng);
        for (int trial = 0; trial < 20; ++trial) {
            const NetInput in = random_input(net, rng);
            const Vec v = gauss_sample(rng, 2);
            const double tr = rng.uniform(-1, 1), tt = rng.uniform(-1, 1);
            const double h = 1e-5;
            const Vec fd = (forward(net, {in.z + h * v, in.cond, in.r + h * tr, in.t + h * tt}) -
                            forward(net, {in.z - h * v, in.cond, in.r - h * tr, in.t - h * tt})) /
                           (2 * h);
            CHECK(rel_err(jvp(net, in, v, tr, tt), fd) < 1e-6);
        }
    }
}

TEST_CASE("jvp of zero tangents is zero; linear net gives A v") {
    Rng rng(15);
    const MlpNet net = random_net(shape(3, 1, {8}), rng);
    const NetInput in = random_input(net, rng);
    CHECK(jvp(net, in, Vec::Zero(3), 0, 0).isZero());

    NetShape s = shape(2, 0, {}, 2);
    Layer l;
    l.weight = Mat::Zero(2, static_cast<Eigen::Index>(s.in_dim()));
    Mat a(2, 2);
    a << 1.5, -2.0, 0.25, 3.0;
    l.weight.leftCols(2) = a;
    l.bias = Vec::Zero(2);
    const MlpNet lin(s, {l});
    Vec v(2);
    v << 0.7, -0.4;
    CHECK(jvp(lin, {gauss_sample(rng, 2), Vec(0), 0.3, 0.8}, v, 0.0, 1.0) == Vec(a * v));
}

TEST_CASE("checkpoint round trip is bit exact") {
    Rng rng(16);
    const MlpNet net = random_net(shape(4, 3, {16, 8}, 2, Activation::gelu), rng);
    const auto bytes = serialize(net);
    const MlpNet back = deserialize(bytes);
    CHECK(serialize(back) == bytes);
    CHECK(back.shape().activation == Activation::gelu);
    CHECK(back.shape().hidden == net.shape().hidden);
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
        CHECK(back.layers()[i].weight == net.layers()[i].weight);
        CHECK(back.layers()[i].bias == net.layers()[i].bias);
    }
    const auto path = std::filesystem::temp_directory_path() / "mfvla_test_ckpt.bin";
    save_checkpoint(net, path);
    CHECK(serialize(load_checkpoint(path)) == bytes);
    std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
    Rng rng(17);
    const auto bytes = serialize(random_net(shape(2, 1, {4}), rng));
    auto flipped = bytes;
    flipped[flipped.size() / 2] ^= 0x01;
    CHECK_THROWS_AS(deserialize(flipped), ParseError);
    CHECK_THROWS_AS(deserialize(std::vector<unsigned char>(bytes.begin(), bytes.begin() + 20)), ParseError);
    auto magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(deserialize(magic), ParseError);
    CHECK_THROWS_AS(deserialize({}), ParseError);
}
