// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mf/core.hpp"

namespace mf {

/// Anything that maps (z, cond, r, t) to a field value shaped like z.
/// Samplers only need this; learned nets and analytic oracle fields both
/// implement it.
class VectorField {
public:
    virtual ~VectorField() = default;
    virtual std::size_t z_dim() const = 0;
    virtual std::size_t cond_dim() const = 0;
    virtual Vec eval(const Vec& z, const Vec& cond, double r, double t) const = 0;
};

enum class Activation { tanh, gelu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct Layer {
    Mat weight;  // out x in
    Vec bias;    // out
};

struct NetShape {
    std::size_t z_dim = 0;
    std::size_t cond_dim = 0;
    std::size_t time_embed_dim = 2;
    std::vector<std::size_t> hidden;
    Activation activation = Activation::tanh;

    /// z, cond, embed(t), embed(t - r) concatenated.
    std::size_t in_dim() const { return z_dim + cond_dim + 2 * time_embed_dim; }
};

/// Network input for one sample. Requires 0 <= r <= t <= 1.
struct NetInput {
    Vec z;
    Vec cond;
    double r = 0.0;
    double t = 1.0;
};

/// A batch of inputs, one sample per row.
struct BatchInput {
    Mat z;     // B x z_dim
    Mat cond;  // B x cond_dim
    Vec r;     // B
    Vec t;     // B

    std::size_t size() const { return static_cast<std::size_t>(z.rows()); }
    static BatchInput single(const NetInput& in);
};

/// Gradient accumulators with exactly the layer shapes of an MlpNet.
struct GradBuffer {
    std::vector<Layer> layers;

    GradBuffer& operator+=(const GradBuffer& o);
    std::size_t size() const;
    /// All entries in layer order, weights (row-major) then bias.
    Vec flatten() const;
};

/// Sinusoidal embedding [sin(w_k s), cos(w_k s)] with w_k = 2*pi*2^k,
/// k = 0 .. dim/2 - 1. `dim` must be even and >= 2.
Vec time_embed(double s, std::size_t dim);

/// Conditioned MLP u_theta(z, r, t | cond). Hidden layers use the configured
/// activation; the output layer is linear.
class MlpNet final : public VectorField {
public:
    MlpNet() = default;
    MlpNet(NetShape shape, std::vector<Layer> layers);

    /// Glorot-uniform hidden weights, zero biases, zero output layer.
    static MlpNet init(const NetShape& shape, Rng& rng);

    const NetShape& shape() const { return shape_; }
    std::size_t in_dim() const { return shape_.in_dim(); }
    std::size_t out_dim() const { return shape_.z_dim; }
    std::size_t z_dim() const override { return shape_.z_dim; }
    std::size_t cond_dim() const override { return shape_.cond_dim; }

    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<Layer>& layers() { return layers_; }
    std::size_t parameter_count() const;

    GradBuffer zero_grad() const;

    Vec eval(const Vec& z, const Vec& cond, double r, double t) const override;

private:
    NetShape shape_;
    std::vector<Layer> layers_;
};

/// Intermediate values of a batched forward pass, kept for backward.
struct ForwardCache {
    std::vector<Eigen::MatrixXd> pre;   // per layer, out x B
    std::vector<Eigen::MatrixXd> post;  // post[0] is the input (in x B)
};

/// Assembled network input, in_dim x B.
Eigen::MatrixXd assemble_input(const MlpNet& net, const BatchInput& in);

Vec forward(const MlpNet& net, const NetInput& in);
/// B x out_dim.
Mat forward_batch(const MlpNet& net, const BatchInput& in, ForwardCache* cache = nullptr);

/// Reverse-mode gradient of <forward(net, in), out_grad> w.r.t. all parameters.
GradBuffer backward(const MlpNet& net, const NetInput& in, const Vec& out_grad);
/// Sum over the batch; out_grad is B x out_dim. `cache` must come from
/// forward_batch on the same net and input.
GradBuffer backward_batch(const MlpNet& net, const ForwardCache& cache, const Mat& out_grad);

/// Forward-mode directional derivative of the output along
/// (tangent_z, tangent_r, tangent_t). Produces no parameter gradients.
Vec jvp(const MlpNet& net, const NetInput& in, const Vec& tangent_z, double tangent_r,
        double tangent_t);
/// Batched jvp: tangent_z is B x z_dim, tangent_r/tangent_t are length B.
Mat jvp_batch(const MlpNet& net, const BatchInput& in, const Mat& tangent_z, const Vec& tangent_r,
              const Vec& tangent_t);

/// Binary checkpoint: header, dims, activation, parameters in layer order as
/// little-endian IEEE doubles, trailing SHA-256 of everything before it.
std::vector<unsigned char> serialize(const MlpNet& net);
MlpNet deserialize(const std::vector<unsigned char>& bytes);
void save_checkpoint(const MlpNet& net, const std::filesystem::path& path);
MlpNet load_checkpoint(const std::filesystem::path& path);

}  // namespace mf
