#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "d2ssl/numerics.hpp"

namespace d2ssl {

enum class Activation { Tanh, Relu, Linear };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation a);

/// y = act(W x + b) with W stored as (out x in).
struct DenseLayer {
    Matrix weight;
    Vector bias;
    Activation activation = Activation::Tanh;

    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// MLP backbone producing the feature f (dimension D) followed by the
/// bias-free head: logits = head^T f with head of shape D x N.
struct ModelParams {
    std::vector<DenseLayer> layers;
    Matrix head;

    std::size_t input_dim() const;
    std::size_t feature_dim() const { return head.rows(); }
    std::size_t num_classes() const { return head.cols(); }
    /// Input, hidden and class sizes, e.g. {2, 64, 2, 4}.
    std::vector<std::size_t> layer_sizes() const;

    /// Every tensor in a fixed order: (weight, bias) per layer, then head.
    std::vector<std::span<double>> tensors();
    std::vector<std::span<const double>> tensors() const;

    /// Throws DimensionError when adjacent layers do not chain.
    void validate() const;

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct ForwardTrace {
    Vector input;
    std::vector<Vector> pre_activations;
    std::vector<Vector> activations;
    Vector feature;
    LogitVector logits;
    ProbVector prediction;
    LogitVector log_prediction;
};

/// Gradient buffers shaped like ModelParams.
struct GradientSet {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;
    Matrix head;

    static GradientSet zeros_like(const ModelParams& params);

    std::vector<std::span<double>> tensors();
    std::vector<std::span<const double>> tensors() const;

    void set_zero();
    /// this += scale * other
    void add_scaled(const GradientSet& other, double scale);
    void scale(double s);
    bool all_finite() const;
};

/// Weights ~ N(0, 1/fan_in), biases zero. Hidden and feature layers share
/// `activation`; sizes run input -> hidden... -> feature D -> N classes.
ModelParams init_params(std::span<const std::size_t> layer_sizes, Activation activation, Rng& rng);

ForwardTrace forward(const ModelParams& params, std::span<const double> x);

/// Feature f only, skipping the head.
Vector extract_features(const ModelParams& params, std::span<const double> x);

/// Exact gradients of a scalar loss whose gradient w.r.t. the logits is
/// dL_dlogits. Accumulates into `out` scaled by `scale`.
void backward_accumulate(const ModelParams& params, const ForwardTrace& trace,
                         std::span<const double> dL_dlogits, GradientSet& out, double scale = 1.0);

GradientSet backward(const ModelParams& params, const ForwardTrace& trace,
                     std::span<const double> dL_dlogits);

/// Checkpoint layout (little-endian):
///   "D2CK", u32 version, u32 count, u64 sizes[count], u8 activation[count - 2],
///   then per backbone layer weight (row-major, out x in) and bias as f64,
///   then the head (row-major, D x N).
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

std::vector<char> encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(std::span<const char> bytes);

} // namespace d2ssl
