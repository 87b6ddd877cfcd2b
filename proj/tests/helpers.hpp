// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>

#include "mf/nnet.hpp"

namespace mf::testing {

/// Net with every weight and bias random, including the output layer, so
/// that no derivative vanishes by construction.
inline MlpNet random_net(const NetShape& shape, Rng& rng, double scale = 0.8) {
    MlpNet net = MlpNet::init(shape, rng);
    for (auto& l : net.layers()) {
        for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = rng.uniform(-scale, scale);
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = rng.uniform(-scale, scale);
    }
    return net;
}

inline NetShape shape(std::size_t z, std::size_t cond, std::vector<std::size_t> hidden, std::size_t embed = 2,
                      Activation act = Activation::tanh) {
    NetShape s;
    s.z_dim = z;
    s.cond_dim = cond;
    s.hidden = std::move(hidden);
    s.time_embed_dim = embed;
    s.activation = act;
    return s;
}

/// r <= t drawn uniformly, kept away from the boundaries so that central
/// differences stay inside [0, 1].
inline NetInput random_input(const MlpNet& net, Rng& rng) {
    NetInput in;
    in.z = gauss_sample(rng, net.z_dim());
    in.cond = net.cond_dim() ? gauss_sample(rng, net.cond_dim()) : Vec(0);
    const double a = rng.uniform(0.05, 0.95), b = rng.uniform(0.05, 0.95);
    in.r = std::min(a, b);
    in.t = std::max(a, b);
    return in;
}

/// |a - b| / max(|a|, |b|, floor).
inline double rel_err(double a, double b, double floor = 1e-4) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double rel_err(const Vec& a, const Vec& b, double floor = 1e-12) {
    return (a - b).norm() / std::max({a.norm(), b.norm(), floor});
}

}  // namespace mf::testing
