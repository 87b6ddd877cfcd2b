// SPDX-License-Identifier: Apache-2.0
#include "mf/nnet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>

#include "mf/io.hpp"

namespace mf {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;

Index idx(std::size_t n) { return static_cast<Index>(n); }

MatrixXd activate(Activation a, const MatrixXd& x) {
    switch (a) {
        case Activation::tanh:
            return x.array().tanh().matrix();
        case Activation::gelu:
            return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); });
    }
    return x;
}

MatrixXd activate_deriv(Activation a, const MatrixXd& x) {
    switch (a) {
        case Activation::tanh:
            return x.unaryExpr([](double v) {
                const double th = std::tanh(v);
                return 1.0 - th * th;
            });
        case Activation::gelu:
            return x.unaryExpr([](double v) {
                const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
                const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
                return cdf + v * pdf;
            });
    }
    return x;
}

void check_batch(const MlpNet& net, const BatchInput& in) {
    const Index b = in.z.rows();
    if (b < 1) throw ContractError("empty batch");
    if (in.z.cols() != idx(net.z_dim())) throw ContractError("input z dimension mismatch");
    if (in.cond.rows() != b || in.cond.cols() != idx(net.cond_dim()))
        throw ContractError("input cond dimension mismatch");
    if (in.r.size() != b || in.t.size() != b) throw ContractError("input r/t length mismatch");
    for (Index i = 0; i < b; ++i) {
        if (!(in.r[i] >= 0.0 && in.r[i] <= in.t[i] && in.t[i] <= 1.0))
            throw ContractError("time pair must satisfy 0 <= r <= t <= 1");
    }
}

double frequency(std::size_t k) {
    return 2.0 * std::numbers::pi * std::ldexp(1.0, static_cast<int>(k));
}

// The net embeds s / 2: time_embed has period 1, which would make t = 0 and
// t = 1 (and intervals of length 0 and 1) indistinguishable.
constexpr double kTimeScale = 0.5;

void embed_into(MatrixXd& x, Index row0, Index col, double s, std::size_t dim) {
    for (std::size_t k = 0; k < dim / 2; ++k) {
        const double w = frequency(k);
        x(row0 + idx(2 * k), col) = std::sin(w * s);
        x(row0 + idx(2 * k + 1), col) = std::cos(w * s);
    }
}

void embed_tangent_into(MatrixXd& dx, Index row0, Index col, double s, double ds, std::size_t dim) {
    for (std::size_t k = 0; k < dim / 2; ++k) {
        const double w = frequency(k);
        dx(row0 + idx(2 * k), col) = w * std::cos(w * s) * ds;
        dx(row0 + idx(2 * k + 1), col) = -w * std::sin(w * s) * ds;
    }
}

}  // namespace

std::string to_string(Activation a) {
    return a == Activation::tanh ? "tanh" : "gelu";
}

Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "gelu") return Activation::gelu;
    throw ConfigError("unknown activation '" + s + "' (expected tanh or gelu)");
}

BatchInput BatchInput::single(const NetInput& in) {
    BatchInput b;
    b.z = in.z.transpose();
    b.cond = Mat(1, in.cond.size());
    if (in.cond.size() > 0) b.cond.row(0) = in.cond.transpose();
    b.r = Vec::Constant(1, in.r);
    b.t = Vec::Constant(1, in.t);
    return b;
}

GradBuffer& GradBuffer::operator+=(const GradBuffer& o) {
    if (o.layers.size() != layers.size()) throw ContractError("GradBuffer shape mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].weight.rows() != o.layers[i].weight.rows() ||
            layers[i].weight.cols() != o.layers[i].weight.cols())
            throw ContractError("GradBuffer shape mismatch");
        layers[i].weight += o.layers[i].weight;
        layers[i].bias += o.layers[i].bias;
    }
    return *this;
}

std::size_t GradBuffer::size() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
}

Vec GradBuffer::flatten() const {
    Vec out(idx(size()));
    Index k = 0;
    for (const auto& l : layers) {
        out.segment(k, l.weight.size()) = l.weight.reshaped<Eigen::RowMajor>();
        k += l.weight.size();
        out.segment(k, l.bias.size()) = l.bias;
        k += l.bias.size();
    }
    return out;
}

Vec time_embed(double s, std::size_t dim) {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("time embedding dimension must be even and >= 2");
    MatrixXd tmp(idx(dim), 1);
    embed_into(tmp, 0, 0, s, dim);
    return tmp.col(0);
}

MlpNet::MlpNet(NetShape shape, std::vector<Layer> layers) : shape_(std::move(shape)), layers_(std::move(layers)) {
    if (shape_.z_dim < 1) throw ConfigError("z_dim must be >= 1");
    if (shape_.time_embed_dim < 2 || shape_.time_embed_dim % 2 != 0)
        throw ConfigError("time embedding dimension must be even and >= 2");
    if (layers_.size() != shape_.hidden.size() + 1) throw ConfigError("layer count does not match hidden dims");
    std::size_t prev = shape_.in_dim();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const std::size_t out = i < shape_.hidden.size() ? shape_.hidden[i] : shape_.z_dim;
        if (out < 1) throw ConfigError("hidden widths must be >= 1");
        if (layers_[i].weight.rows() != idx(out) || layers_[i].weight.cols() != idx(prev) ||
            layers_[i].bias.size() != idx(out))
            throw ConfigError("layer " + std::to_string(i) + " has inconsistent dimensions");
        prev = out;
    }
}

MlpNet MlpNet::init(const NetShape& shape, Rng& rng) {
    std::vector<Layer> layers;
    std::size_t prev = shape.in_dim();
    for (std::size_t i = 0; i <= shape.hidden.size(); ++i) {
        const bool last = i == shape.hidden.size();
        const std::size_t out = last ? shape.z_dim : shape.hidden[i];
        Layer l{Mat::Zero(idx(out), idx(prev)), Vec::Zero(idx(out))};
        if (!last) {
            const double bound = std::sqrt(6.0 / static_cast<double>(prev + out));
            for (Index r = 0; r < l.weight.rows(); ++r)
                for (Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = rng.uniform(-bound, bound);
        }
        layers.push_back(std::move(l));
        prev = out;
    }
    return MlpNet(shape, std::move(layers));
}

std::size_t MlpNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
}

GradBuffer MlpNet::zero_grad() const {
    GradBuffer g;
    for (const auto& l : layers_)
        g.layers.push_back({Mat::Zero(l.weight.rows(), l.weight.cols()), Vec::Zero(l.bias.size())});
    return g;
}

Vec MlpNet::eval(const Vec& z, const Vec& cond, double r, double t) const {
    return forward(*this, NetInput{z, cond, r, t});
}

MatrixXd assemble_input(const MlpNet& net, const BatchInput& in) {
    check_batch(net, in);
    const auto& s = net.shape();
    const Index b = in.z.rows();
    MatrixXd x(idx(s.in_dim()), b);
    x.topRows(idx(s.z_dim)) = in.z.transpose();
    if (s.cond_dim > 0) x.middleRows(idx(s.z_dim), idx(s.cond_dim)) = in.cond.transpose();
    const Index t_row = idx(s.z_dim + s.cond_dim);
    const Index d_row = t_row + idx(s.time_embed_dim);
    for (Index c = 0; c < b; ++c) {
        embed_into(x, t_row, c, kTimeScale * in.t[c], s.time_embed_dim);
        embed_into(x, d_row, c, kTimeScale * (in.t[c] - in.r[c]), s.time_embed_dim);
    }
    return x;
}

Mat forward_batch(const MlpNet& net, const BatchInput& in, ForwardCache* cache) {
    MatrixXd h = assemble_input(net, in);
    const auto& layers = net.layers();
    const Activation act = net.shape().activation;
    if (cache) {
        cache->pre.clear();
        cache->post.clear();
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        MatrixXd pre = layers[i].weight * h;
        pre.colwise() += layers[i].bias;
        const bool last = i + 1 == layers.size();
        MatrixXd next = last ? pre : activate(act, pre);
        if (cache) {
            cache->post.push_back(std::move(h));
            cache->pre.push_back(std::move(pre));
        }
        h = std::move(next);
    }
    return h.transpose();
}

Vec forward(const MlpNet& net, const NetInput& in) {
    return forward_batch(net, BatchInput::single(in)).row(0).transpose();
}

GradBuffer backward_batch(const MlpNet& net, const ForwardCache& cache, const Mat& out_grad) {
    const auto& layers = net.layers();
    if (cache.pre.size() != layers.size()) throw ContractError("forward cache does not match net");
    const Index b = cache.pre.back().cols();
    if (out_grad.rows() != b || out_grad.cols() != idx(net.out_dim()))
        throw ContractError("out_grad dimension mismatch");
    GradBuffer g;
    g.layers.resize(layers.size());
    MatrixXd grad = out_grad.transpose();
    for (std::size_t k = layers.size(); k-- > 0;) {
        const bool last = k + 1 == layers.size();
        MatrixXd delta = last ? grad : MatrixXd(grad.cwiseProduct(activate_deriv(net.shape().activation, cache.pre[k])));
        g.layers[k].weight = delta * cache.post[k].transpose();
        g.layers[k].bias = delta.rowwise().sum();
        if (k > 0) grad = layers[k].weight.transpose() * delta;
    }
    return g;
}

GradBuffer backward(const MlpNet& net, const NetInput& in, const Vec& out_grad) {
    if (out_grad.size() != idx(net.out_dim())) throw ContractError("out_grad dimension mismatch");
    ForwardCache cache;
    forward_batch(net, BatchInput::single(in), &cache);
    return backward_batch(net, cache, out_grad.transpose());
}

Mat jvp_batch(const MlpNet& net, const BatchInput& in, const Mat& tangent_z, const Vec& tangent_r,
              const Vec& tangent_t) {
    MatrixXd h = assemble_input(net, in);
    const auto& s = net.shape();
    const Index b = in.z.rows();
    if (tangent_z.rows() != b || tangent_z.cols() != idx(s.z_dim)) throw ContractError("tangent_z dimension mismatch");
    if (tangent_r.size() != b || tangent_t.size() != b) throw ContractError("tangent r/t length mismatch");

    MatrixXd dh = MatrixXd::Zero(h.rows(), b);
    dh.topRows(idx(s.z_dim)) = tangent_z.transpose();
    const Index t_row = idx(s.z_dim + s.cond_dim);
    const Index d_row = t_row + idx(s.time_embed_dim);
    for (Index c = 0; c < b; ++c) {
        // d(t - r) = dt - dr
        embed_tangent_into(dh, t_row, c, kTimeScale * in.t[c], kTimeScale * tangent_t[c], s.time_embed_dim);
        embed_tangent_into(dh, d_row, c, kTimeScale * (in.t[c] - in.r[c]), kTimeScale * (tangent_t[c] - tangent_r[c]),
                           s.time_embed_dim);
    }

    const auto& layers = net.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        MatrixXd pre = layers[i].weight * h;
        pre.colwise() += layers[i].bias;
        MatrixXd dpre = layers[i].weight * dh;
        if (i + 1 == layers.size()) {
            dh = std::move(dpre);
        } else {
            dh = dpre.cwiseProduct(activate_deriv(s.activation, pre));
            h = activate(s.activation, pre);
        }
    }
    return dh.transpose();
}

Vec jvp(const MlpNet& net, const NetInput& in, const Vec& tangent_z, double tangent_r, double tangent_t) {
    if (tangent_z.size() != in.z.size()) throw ContractError("tangent_z dimension mismatch");
    return jvp_batch(net, BatchInput::single(in), tangent_z.transpose(), Vec::Constant(1, tangent_r),
                     Vec::Constant(1, tangent_t))
        .row(0)
        .transpose();
}

// ---------------------------------------------------------------------------
// Checkpoint format

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

constexpr char kMagic[8] = {'M', 'F', 'N', 'E', 'T', '0', '0', '1'};
constexpr std::size_t kDigest = 32;

struct Writer {
    std::vector<unsigned char> buf;
    void raw(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        buf.insert(buf.end(), c, c + n);
    }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
};

struct Reader {
    const std::vector<unsigned char>& buf;
    std::size_t pos = 0;
    std::size_t end;
    void raw(void* p, std::size_t n) {
        if (pos + n > end) throw ParseError("checkpoint truncated at byte " + std::to_string(pos));
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, sizeof v);
        return v;
    }
    double f64() {
        double v;
        raw(&v, sizeof v);
        return v;
    }
};

}  // namespace

std::vector<unsigned char> serialize(const MlpNet& net) {
    Writer w;
    const auto& s = net.shape();
    w.raw(kMagic, sizeof kMagic);
    w.u64(s.z_dim);
    w.u64(s.cond_dim);
    w.u64(s.time_embed_dim);
    w.u64(s.activation == Activation::tanh ? 0 : 1);
    w.u64(s.hidden.size());
    for (auto h : s.hidden) w.u64(h);
    for (const auto& l : net.layers()) {
        for (Index r = 0; r < l.weight.rows(); ++r)
            for (Index c = 0; c < l.weight.cols(); ++c) w.f64(l.weight(r, c));
        for (Index i = 0; i < l.bias.size(); ++i) w.f64(l.bias[i]);
    }
    auto digest = sha256(w.buf.data(), w.buf.size());
    w.raw(digest.data(), digest.size());
    return std::move(w.buf);
}

MlpNet deserialize(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < sizeof kMagic + kDigest) throw ParseError("checkpoint too short (" + std::to_string(bytes.size()) + " bytes)");
    if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw ParseError("bad checkpoint magic");
    const std::size_t body = bytes.size() - kDigest;
    const auto digest = sha256(bytes.data(), body);
    if (std::memcmp(digest.data(), bytes.data() + body, kDigest) != 0)
        throw ParseError("checkpoint digest mismatch (file corrupt)");

    Reader r{bytes, sizeof kMagic, body};
    NetShape s;
    s.z_dim = r.u64();
    s.cond_dim = r.u64();
    s.time_embed_dim = r.u64();
    const auto act = r.u64();
    if (act > 1) throw ParseError("unknown activation tag " + std::to_string(act));
    s.activation = act == 0 ? Activation::tanh : Activation::gelu;
    const auto n_hidden = r.u64();
    if (n_hidden > 64) throw ParseError("implausible hidden layer count " + std::to_string(n_hidden));
    for (std::uint64_t i = 0; i < n_hidden; ++i) {
        const auto h = r.u64();
        if (h == 0 || h > (1u << 20)) throw ParseError("implausible hidden width " + std::to_string(h));
        s.hidden.push_back(h);
    }
    if (s.z_dim == 0 || s.z_dim > (1u << 20) || s.cond_dim > (1u << 20) || s.time_embed_dim > (1u << 12))
        throw ParseError("implausible checkpoint dimensions");

    std::vector<Layer> layers;
    std::size_t prev = s.in_dim();
    for (std::size_t i = 0; i <= s.hidden.size(); ++i) {
        const std::size_t out = i < s.hidden.size() ? s.hidden[i] : s.z_dim;
        Layer l{Mat(idx(out), idx(prev)), Vec(idx(out))};
        for (Index a = 0; a < l.weight.rows(); ++a)
            for (Index c = 0; c < l.weight.cols(); ++c) l.weight(a, c) = r.f64();
        for (Index a = 0; a < l.bias.size(); ++a) l.bias[a] = r.f64();
        layers.push_back(std::move(l));
        prev = out;
    }
    if (r.pos != body) throw ParseError("checkpoint has " + std::to_string(body - r.pos) + " trailing bytes");
    try {
        return MlpNet(std::move(s), std::move(layers));
    } catch (const ConfigError& e) {
        throw ParseError(std::string("checkpoint shape invalid: ") + e.what());
    }
}

void save_checkpoint(const MlpNet& net, const std::filesystem::path& path) {
    write_bytes(path, serialize(net));
}

MlpNet load_checkpoint(const std::filesystem::path& path) {
    return deserialize(read_bytes(path));
}

}  // namespace mf
