#include "d2ssl/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "binary_io.hpp"
#include "d2ssl/errors.hpp"

namespace d2ssl {

namespace {

constexpr char kCheckpointMagic[4] = {'D', '2', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

double activate(Activation a, double z) {
    switch (a) {
    case Activation::Tanh:
        return std::tanh(z);
    case Activation::Relu:
        return z > 0.0 ? z : 0.0;
    case Activation::Linear:
        return z;
    }
    return z;
}

// Derivative expressed through the pre-activation z and output y.
double activate_grad(Activation a, double z, double y) {
    switch (a) {
    case Activation::Tanh:
        return 1.0 - y * y;
    case Activation::Relu:
        return z > 0.0 ? 1.0 : 0.0;
    case Activation::Linear:
        return 1.0;
    }
    return 1.0;
}

std::uint8_t activation_code(Activation a) { return static_cast<std::uint8_t>(a); }

Activation activation_from_code(std::uint8_t c) {
    if (c > static_cast<std::uint8_t>(Activation::Linear)) {
        throw FormatError("checkpoint: unknown activation code " + std::to_string(c));
    }
    return static_cast<Activation>(c);
}

} // namespace

Activation parse_activation(std::string_view name) {
    if (name == "tanh") {
        return Activation::Tanh;
    }
    if (name == "relu") {
        return Activation::Relu;
    }
    if (name == "linear") {
        return Activation::Linear;
    }
    throw ConfigError("unknown activation '" + std::string(name) + "' (expected tanh, relu or linear)");
}

std::string_view to_string(Activation a) {
    switch (a) {
    case Activation::Tanh:
        return "tanh";
    case Activation::Relu:
        return "relu";
    case Activation::Linear:
        return "linear";
    }
    return "?";
}

std::size_t ModelParams::input_dim() const {
    return layers.empty() ? head.rows() : layers.front().weight.cols();
}

std::vector<std::size_t> ModelParams::layer_sizes() const {
    std::vector<std::size_t> sizes{input_dim()};
    for (const auto& layer : layers) {
        sizes.push_back(layer.weight.rows());
    }
    sizes.push_back(num_classes());
    return sizes;
}

std::vector<std::span<double>> ModelParams::tensors() {
    std::vector<std::span<double>> out;
    for (auto& layer : layers) {
        out.emplace_back(layer.weight.data());
        out.emplace_back(layer.bias);
    }
    out.emplace_back(head.data());
    return out;
}

std::vector<std::span<const double>> ModelParams::tensors() const {
    std::vector<std::span<const double>> out;
    for (const auto& layer : layers) {
        out.emplace_back(layer.weight.data());
        out.emplace_back(layer.bias);
    }
    out.emplace_back(head.data());
    return out;
}

void ModelParams::validate() const {
    std::size_t width = input_dim();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& layer = layers[i];
        if (layer.weight.cols() != width || layer.bias.size() != layer.weight.rows()) {
            throw DimensionError("layer " + std::to_string(i) + " does not chain: expects input " +
                                 std::to_string(layer.weight.cols()) + ", got " + std::to_string(width));
        }
        width = layer.weight.rows();
    }
    if (head.rows() != width || head.cols() == 0) {
        throw DimensionError("head rows " + std::to_string(head.rows()) + " != feature dimension " +
                             std::to_string(width));
    }
}

GradientSet GradientSet::zeros_like(const ModelParams& params) {
    GradientSet g;
    for (const auto& layer : params.layers) {
        g.weights.emplace_back(layer.weight.rows(), layer.weight.cols());
        g.biases.emplace_back(layer.bias.size(), 0.0);
    }
    g.head = Matrix(params.head.rows(), params.head.cols());
    return g;
}

std::vector<std::span<double>> GradientSet::tensors() {
    std::vector<std::span<double>> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        out.emplace_back(weights[i].data());
        out.emplace_back(biases[i]);
    }
    out.emplace_back(head.data());
    return out;
}

std::vector<std::span<const double>> GradientSet::tensors() const {
    std::vector<std::span<const double>> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        out.emplace_back(weights[i].data());
        out.emplace_back(biases[i]);
    }
    out.emplace_back(head.data());
    return out;
}

void GradientSet::set_zero() {
    for (auto t : tensors()) {
        std::fill(t.begin(), t.end(), 0.0);
    }
}

void GradientSet::add_scaled(const GradientSet& other, double s) {
    auto mine = tensors();
    auto theirs = other.tensors();
    if (mine.size() != theirs.size()) {
        throw DimensionError("GradientSet::add_scaled: tensor count mismatch");
    }
    for (std::size_t t = 0; t < mine.size(); ++t) {
        if (mine[t].size() != theirs[t].size()) {
            throw DimensionError("GradientSet::add_scaled: shape mismatch");
        }
        for (std::size_t i = 0; i < mine[t].size(); ++i) {
            mine[t][i] += s * theirs[t][i];
        }
    }
}

void GradientSet::scale(double s) {
    for (auto t : tensors()) {
        for (double& v : t) {
            v *= s;
        }
    }
}

bool GradientSet::all_finite() const {
    for (auto t : tensors()) {
        if (!d2ssl::all_finite(t)) {
            return false;
        }
    }
    return true;
}

ModelParams init_params(std::span<const std::size_t> layer_sizes, Activation activation, Rng& rng) {
    if (layer_sizes.size() < 2) {
        throw ConfigError("init_params: need at least input and class sizes");
    }
    for (std::size_t s : layer_sizes) {
        if (s == 0) {
            throw ConfigError("init_params: layer sizes must be positive");
        }
    }
    ModelParams params;
    for (std::size_t i = 0; i + 2 < layer_sizes.size(); ++i) {
        const std::size_t fan_in = layer_sizes[i];
        DenseLayer layer{Matrix(layer_sizes[i + 1], fan_in), Vector(layer_sizes[i + 1], 0.0), activation};
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& w : layer.weight.data()) {
            w = scale * rng.normal();
        }
        params.layers.push_back(std::move(layer));
    }
    const std::size_t d = layer_sizes[layer_sizes.size() - 2];
    params.head = Matrix(d, layer_sizes.back());
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& w : params.head.data()) {
        w = scale * rng.normal();
    }
    return params;
}

ForwardTrace forward(const ModelParams& params, std::span<const double> x) {
    if (x.size() != params.input_dim()) {
        throw DimensionError("forward: input has " + std::to_string(x.size()) + " entries, model expects " +
                             std::to_string(params.input_dim()));
    }
    ForwardTrace trace;
    trace.input.assign(x.begin(), x.end());
    trace.pre_activations.reserve(params.layers.size());
    trace.activations.reserve(params.layers.size());

    std::span<const double> current = trace.input;
    for (const auto& layer : params.layers) {
        const std::size_t out_dim = layer.weight.rows();
        Vector z(out_dim);
        Vector a(out_dim);
        for (std::size_t r = 0; r < out_dim; ++r) {
            const auto w = layer.weight.row(r);
            double acc = layer.bias[r];
            for (std::size_t c = 0; c < w.size(); ++c) {
                acc += w[c] * current[c];
            }
            z[r] = acc;
            a[r] = activate(layer.activation, acc);
        }
        trace.pre_activations.push_back(std::move(z));
        trace.activations.push_back(std::move(a));
        current = trace.activations.back();
    }
    trace.feature.assign(current.begin(), current.end());

    const std::size_t n = params.num_classes();
    Vector logits(n, 0.0);
    for (std::size_t d = 0; d < params.feature_dim(); ++d) {
        const double f = trace.feature[d];
        const auto w = params.head.row(d);
        for (std::size_t k = 0; k < n; ++k) {
            logits[k] += w[k] * f;
        }
    }
    trace.logits.values = std::move(logits);
    trace.prediction = softmax(trace.logits);
    trace.log_prediction = log_softmax(trace.logits);
    return trace;
}

Vector extract_features(const ModelParams& params, std::span<const double> x) {
    return forward(params, x).feature;
}

void backward_accumulate(const ModelParams& params, const ForwardTrace& trace,
                         std::span<const double> dL_dlogits, GradientSet& out, double scale) {
    const std::size_t n = params.num_classes();
    const std::size_t d = params.feature_dim();
    if (dL_dlogits.size() != n || trace.feature.size() != d ||
        trace.activations.size() != params.layers.size() || out.weights.size() != params.layers.size() ||
        out.head.rows() != d || out.head.cols() != n) {
        throw DimensionError("backward: trace, gradient or parameter shapes disagree");
    }

    // Head: column k of dL/dW is dL/dlogit_k * f.
    Vector upstream(d, 0.0);
    for (std::size_t r = 0; r < d; ++r) {
        const double f = trace.feature[r];
        const auto w = params.head.row(r);
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            out.head(r, k) += scale * dL_dlogits[k] * f;
            acc += w[k] * dL_dlogits[k];
        }
        upstream[r] = acc;
    }

    for (std::size_t li = params.layers.size(); li-- > 0;) {
        const auto& layer = params.layers[li];
        const auto& z = trace.pre_activations[li];
        const auto& y = trace.activations[li];
        const std::span<const double> below = li == 0 ? std::span<const double>(trace.input)
                                                      : std::span<const double>(trace.activations[li - 1]);
        Vector delta(z.size());
        for (std::size_t r = 0; r < z.size(); ++r) {
            delta[r] = upstream[r] * activate_grad(layer.activation, z[r], y[r]);
        }
        auto& gw = out.weights[li];
        auto& gb = out.biases[li];
        Vector next(below.size(), 0.0);
        for (std::size_t r = 0; r < delta.size(); ++r) {
            const double dr = delta[r];
            gb[r] += scale * dr;
            const auto w = layer.weight.row(r);
            for (std::size_t c = 0; c < below.size(); ++c) {
                gw(r, c) += scale * dr * below[c];
                next[c] += w[c] * dr;
            }
        }
        upstream = std::move(next);
    }
}

GradientSet backward(const ModelParams& params, const ForwardTrace& trace,
                     std::span<const double> dL_dlogits) {
    GradientSet g = GradientSet::zeros_like(params);
    backward_accumulate(params, trace, dL_dlogits, g, 1.0);
    return g;
}

std::vector<char> encode_checkpoint(const ModelParams& params) {
    params.validate();
    detail::ByteWriter w;
    w.bytes(kCheckpointMagic);
    w.u32_le(kCheckpointVersion);
    const auto sizes = params.layer_sizes();
    w.u32_le(static_cast<std::uint32_t>(sizes.size()));
    for (std::size_t s : sizes) {
        w.u64_le(s);
    }
    for (const auto& layer : params.layers) {
        w.u8(activation_code(layer.activation));
    }
    for (auto t : params.tensors()) {
        for (double v : t) {
            w.f64_le(v);
        }
    }
    return std::move(w.buffer());
}

ModelParams decode_checkpoint(std::span<const char> bytes) {
    detail::ByteReader r(bytes, "checkpoint");
    const auto magic = r.bytes(4);
    if (!std::equal(magic.begin(), magic.end(), std::begin(kCheckpointMagic))) {
        throw FormatError("checkpoint: bad magic (expected D2CK)");
    }
    const std::uint32_t version = r.u32_le();
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = r.u32_le();
    if (count < 2 || count > 1024) {
        throw FormatError("checkpoint: implausible layer count " + std::to_string(count));
    }
    std::vector<std::size_t> sizes(count);
    for (auto& s : sizes) {
        s = r.u64_le();
        if (s == 0 || s > (1u << 24)) {
            throw FormatError("checkpoint: implausible layer size");
        }
    }
    ModelParams params;
    for (std::size_t i = 0; i + 2 < sizes.size(); ++i) {
        params.layers.push_back(
            DenseLayer{Matrix(sizes[i + 1], sizes[i]), Vector(sizes[i + 1], 0.0), Activation::Tanh});
    }
    for (auto& layer : params.layers) {
        layer.activation = activation_from_code(r.u8());
    }
    params.head = Matrix(sizes[sizes.size() - 2], sizes.back());
    for (auto t : params.tensors()) {
        for (double& v : t) {
            v = r.f64_le();
        }
    }
    if (r.remaining() != 0) {
        throw FormatError("checkpoint: trailing bytes");
    }
    return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    detail::write_file(path, encode_checkpoint(params));
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return decode_checkpoint(bytes);
}

} // namespace d2ssl
