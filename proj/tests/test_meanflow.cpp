// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"

#include "mf/meanflow.hpp"
#include "mf/tasks.hpp"

using namespace mf;
using namespace mf::testing;

namespace {

TrainBatch random_batch(const MlpNet& net, Rng& rng, std::size_t n, double flow_ratio) {
    TrainBatch b;
    const auto zd = static_cast<Eigen::Index>(net.z_dim()), cd = static_cast<Eigen::Index>(net.cond_dim());
    b.x.resize(static_cast<Eigen::Index>(n), zd);
    b.e.resize(static_cast<Eigen::Index>(n), zd);
    b.cond.resize(static_cast<Eigen::Index>(n), cd);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        b.x.row(r) = gauss_sample(rng, net.z_dim()).transpose();
        b.e.row(r) = gauss_sample(rng, net.z_dim()).transpose();
        if (cd) b.cond.row(r) = gauss_sample(rng, net.cond_dim()).transpose();
        b.pairs.push_back(sample_time_pair(rng, flow_ratio));
    }
    return b;
}

}  // namespace

TEST_CASE("time pairs are ordered and the degenerate fraction follows flow_ratio") {
    Rng rng(1);
    for (double fr : {0.0, 0.2, 0.5, 1.0}) {
        const int n = 40000;
        int degenerate = 0;
        for (int i = 0; i < n; ++i) {
            const TimePair p = sample_time_pair(rng, fr);
            REQUIRE(p.r >= 0.0);
            REQUIRE(p.r <= p.t);
            REQUIRE(p.t <= 1.0);
            degenerate += p.degenerate();
        }
        CHECK(std::abs(static_cast<double>(degenerate) / n - (1.0 - fr)) < 0.01);
    }
    CHECK_THROWS_AS(sample_time_pair(rng, 1.5), ContractError);
}

TEST_CASE("degenerate pairs return the conditional velocity bit-exactly") {
    Rng rng(2);
    const MlpNet net = random_net(shape(3, 2, {16}), rng);
    for (int i = 0; i < 50; ++i) {
        const double t = rng.uniform();
        const Vec z = gauss_sample(rng, 3), v = gauss_sample(rng, 3), c = gauss_sample(rng, 2);
        CHECK(meanflow_target(net, z, c, {t, t}, v) == v);
    }
}

TEST_CASE("target on a linear net u = A z is v - (t - r) A v") {
    NetShape s = shape(2, 0, {}, 2);
    Layer l;
    l.weight = Mat::Zero(2, static_cast<Eigen::Index>(s.in_dim()));
    Mat a(2, 2);
    a << 2.0, 0.5, -1.0, 1.0;
    l.weight.leftCols(2) = a;
    l.bias = Vec::Zero(2);
    const MlpNet lin(s, {l});
    Vec z(2), v(2);
    z << 0.1, 0.2;
    v << 1.0, -3.0;
    const Vec tgt = meanflow_target(lin, z, Vec(0), {0.25, 0.75}, v);
    CHECK((tgt - (v - 0.5 * a * v)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("adaptive loss values") {
    Mat p(1, 2), t = Mat::Zero(1, 2);
    p << 3.0, 4.0;
    CHECK(loss_l2(p, t).value == 25.0);
    CHECK(std::abs(loss_adaptive(p, t, 0.5, 1e-3).value - 25.0 / std::sqrt(25.001)) < 1e-9);

    Rng rng(3);
    Mat a(8, 3), b(8, 3);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        a.data()[i] = rng.gauss();
        b.data()[i] = rng.gauss();
    }
    const LossResult l2 = loss_l2(a, b), g1 = loss_adaptive(a, b, 1.0, 1e-3);
    CHECK(g1.value == l2.value);
    CHECK(g1.grad == l2.grad);
    CHECK(std::abs(loss_adaptive(a, b, 1.0 - 1e-8, 1e-3).value - l2.value) < 1e-6);
    CHECK_THROWS_AS(loss_adaptive(a, b, 0.0, 1e-3), ConfigError);
    CHECK_THROWS_AS(loss_l2(a, Mat(8, 2)), ContractError);
}

TEST_CASE("adaptive loss gradient treats the weight as constant") {
    Mat p(1, 2), t = Mat::Zero(1, 2);
    p << 0.3, -0.4;
    const double gamma = 0.5, c = 1e-3;
    const LossResult r = loss_adaptive(p, t, gamma, c);
    const double w = 1.0 / std::pow(0.25 + c, 1.0 - gamma);
    CHECK(r.grad(0, 0) == doctest::Approx(2.0 * w * 0.3).epsilon(1e-12));
    CHECK(r.grad(0, 1) == doctest::Approx(2.0 * w * -0.4).epsilon(1e-12));
}

TEST_CASE("flow_ratio 0 gives flow-matching targets everywhere") {
    Rng rng(4);
    const MlpNet net = random_net(shape(2, 1, {8}), rng);
    const TrainBatch b = random_batch(net, rng, 32, 0.0);
    const PreparedBatch pb = prepare_batch(net, b);
    CHECK(pb.target == Mat(b.e - b.x));
}

TEST_CASE("prepared batch interpolates and matches per-sample targets") {
    Rng rng(5);
    const MlpNet net = random_net(shape(2, 1, {8}), rng);
    const TrainBatch b = random_batch(net, rng, 16, 0.7);
    const PreparedBatch pb = prepare_batch(net, b);
    const FlowPath path;
    for (Eigen::Index i = 0; i < 16; ++i) {
        const Vec x = b.x.row(i).transpose(), e = b.e.row(i).transpose();
        const auto pr = b.pairs[static_cast<std::size_t>(i)];
        const Vec z = interpolate(path, x, e, pr.t);
        CHECK((pb.input.z.row(i).transpose() - z).cwiseAbs().maxCoeff() < 1e-15);
        const Vec tgt = meanflow_target(net, z, b.cond.row(i).transpose(), pr, cond_velocity(path, x, e));
        CHECK((pb.target.row(i).transpose() - tgt).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("stop-gradient: frozen targets give the training gradient") {
    Rng rng(6);
    const MlpNet net = random_net(shape(3, 2, {12, 12}), rng);
    const TrainBatch b = random_batch(net, rng, 24, 0.5);
    TrainConfig cfg;
    const PreparedBatch pb = prepare_batch(net, b);
    const LossAndGrad train_path = loss_and_grad(net, pb.input, pb.target, cfg);
    const Mat frozen = pb.target;  // detached copy
    const LossAndGrad again = loss_and_grad(net, pb.input, frozen, cfg);
    CHECK(train_path.grad.flatten() == again.grad.flatten());
    // A different net inside the target changes the target but the gradient
    // is still backward(pred - target) only.
    Rng other(7);
    const MlpNet counterfactual = random_net(shape(3, 2, {12, 12}), other);
    const PreparedBatch pc = prepare_batch(counterfactual, b);
    CHECK((pc.target - pb.target).norm() > 1e-6);
    ForwardCache cache;
    const Mat pred = forward_batch(net, pc.input, &cache);
    const LossResult lr = loss_adaptive(pred, pc.target, cfg.gamma, cfg.adaptive_c);
    CHECK(loss_and_grad(net, pc.input, pc.target, cfg).grad.flatten() == backward_batch(net, cache, lr.grad).flatten());
}

TEST_CASE("train config json round trip and errors") {
    TrainConfig c;
    c.flow_ratio = 0.3;
    c.hidden_dims = {7, 5};
    c.activation = Activation::gelu;
    c.lr_schedule = TrainConfig::LrSchedule::cosine;
    const TrainConfig back = train_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"flow_ratoi", 0.1}}), ConfigError);
    CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"steps", 0}}), ConfigError);
    CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"gamma", 0.0}}), ConfigError);
    CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"flow_ratio", "high"}}), ConfigError);
    CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"time_embed_dim", 3}}), ConfigError);
    try {
        train_config_from_json(nlohmann::json{{"batchsize", 1}, {"gama", 1}});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("batchsize") != std::string::npos);
        CHECK(std::string(e.what()).find("gama") != std::string::npos);
    }
}

TEST_CASE("cosine schedule") {
    TrainConfig c;
    c.steps = 101;
    c.learn_rate = 2e-3;
    CHECK(c.learn_rate_at(50) == 2e-3);
    c.lr_schedule = TrainConfig::LrSchedule::cosine;
    CHECK(c.learn_rate_at(1) == 2e-3);
    CHECK(c.learn_rate_at(51) == doctest::Approx(1e-3));
    CHECK(std::abs(c.learn_rate_at(101)) < 1e-18);
}

TEST_CASE("condition normalizer folds exactly into the first layer") {
    Rng rng(8);
    MlpNet net = random_net(shape(2, 3, {8}), rng);
    Mat cond(50, 3);
    for (Eigen::Index i = 0; i < cond.rows(); ++i) {
        cond(i, 0) = rng.uniform(0.2, 0.3);
        cond(i, 1) = 5.0;  // constant feature
        cond(i, 2) = rng.gauss() * 4.0 + 1.0;
    }
    const CondNormalizer n = CondNormalizer::fit(cond);
    CHECK(n.scale[1] == 1.0);
    const Mat scaled = n.apply(cond);
    CHECK(std::abs(scaled.col(2).mean()) < 1e-12);
    MlpNet folded = net;
    n.fold_into(folded);
    for (int k = 0; k < 10; ++k) {
        const NetInput in = random_input(net, rng);
        const Vec raw = cond.row(k).transpose();
        const Vec a = forward(net, {in.z, scaled.row(k).transpose(), in.r, in.t});
        const Vec b = forward(folded, {in.z, raw, in.r, in.t});
        CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("training is deterministic and rejects bad input") {
    Rng rng(9);
    TrainingSet ts = gen_gmm_dataset(rng, 200, GmmSpec::circle(4, 2));
    TrainConfig c;
    c.steps = 30;
    c.batch_size = 32;
    c.hidden_dims = {16, 16};
    c.cond_dim = 2;
    const TrainResult a = train(ts, c), b = train(ts, c);
    CHECK(a.report.param_checksum == b.report.param_checksum);
    CHECK(a.report.losses == b.report.losses);
    CHECK(a.report.losses.size() == 30);
    c.seed = 1;
    CHECK(train(ts, c).report.param_checksum != a.report.param_checksum);

    TrainConfig zero = c;
    zero.steps = 0;
    CHECK_THROWS_AS(train(ts, zero), ConfigError);
    TrainingSet empty;
    empty.cond.resize(0, 2);
    empty.x.resize(0, 2);
    CHECK_THROWS_AS(train(empty, c), ConfigError);
    TrainConfig wrong = c;
    wrong.act_dim = 3;
    CHECK_THROWS_AS(train(ts, wrong), ConfigError);
}

TEST_CASE("divergence is reported with the step") {
    Rng rng(10);
    MlpNet net = random_net(shape(2, 0, {8}), rng);
    TrainBatch b = random_batch(net, rng, 8, 0.0);
    b.x(0, 0) = std::nan("");
    TrainConfig c;
    AdamState opt(net);
    try {
        train_step(net, b, c, opt, 17);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.step == 17);
    }
}

TEST_CASE("loss falls on the gmm task") {
    std::vector<double> early, late;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        TrainingSet ts = gen_gmm_dataset(rng, 2000, GmmSpec::circle(4, 2));
        TrainConfig c;
        c.steps = 2000;
        c.batch_size = 64;
        c.hidden_dims = {32, 32};
        c.cond_dim = 2;
        c.seed = seed;
        const TrainReport r = train(ts, c).report;
        double e = 0, l = 0;
        for (int i = 0; i < 10; ++i) {
            e += r.losses[static_cast<std::size_t>(i)];
            l += r.losses[r.losses.size() - 1 - static_cast<std::size_t>(i)];
        }
        early.push_back(e);
        late.push_back(l);
    }
    std::sort(early.begin(), early.end());
    std::sort(late.begin(), late.end());
    CHECK(late[2] < early[2]);
}
