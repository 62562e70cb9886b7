#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "d2ssl/diagnostics.hpp"
#include "d2ssl/errors.hpp"
#include "d2ssl/model.hpp"
#include "d2ssl/pseudo.hpp"
#include "test_support.hpp"

using namespace d2ssl;
using namespace d2ssl::testing;

namespace {

ModelParams make(std::vector<std::size_t> sizes, Activation act, std::uint64_t seed) {
    Rng rng(seed);
    return init_params(sizes, act, rng);
}

void zero_all(ModelParams& p) {
    for (auto t : p.tensors()) {
        for (double& v : t) {
            v = 0.0;
        }
    }
}

// Scalar loss of the whole network: forward KL + entropy against a fixed target.
double composed_loss(const ModelParams& p, const Vector& x, const LogitVector& tilde_log, const D2Config& cfg) {
    const auto trace = forward(p, x);
    return d2_loss(trace.log_prediction, tilde_log, cfg).total;
}

} // namespace

TEST_CASE("layer bookkeeping for a 2-D feature network") {
    const auto p = make({2, 16, 2, 4}, Activation::Tanh, 1);
    REQUIRE(p.layers.size() == 2);
    CHECK(p.layers[0].weight.rows() == 16);
    CHECK(p.layers[0].weight.cols() == 2);
    CHECK(p.layers[1].weight.rows() == 2);
    CHECK(p.layers[1].weight.cols() == 16);
    CHECK(p.head.rows() == 2);
    CHECK(p.head.cols() == 4);
    CHECK(p.feature_dim() == 2);
    CHECK(p.input_dim() == 2);
    CHECK(p.num_classes() == 4);
    CHECK(p.layer_sizes() == std::vector<std::size_t>{2, 16, 2, 4});
    CHECK_NOTHROW(p.validate());
}

TEST_CASE("init is seed deterministic") {
    CHECK(make({2, 16, 2, 4}, Activation::Tanh, 5) == make({2, 16, 2, 4}, Activation::Tanh, 5));
    CHECK_FALSE(make({2, 16, 2, 4}, Activation::Tanh, 5) == make({2, 16, 2, 4}, Activation::Tanh, 6));
}

TEST_CASE("init scale follows fan-in") {
    const auto p = make({100, 1000, 4}, Activation::Tanh, 17);
    const auto w = p.layers[0].weight.data();
    REQUIRE(w.size() == 100000);
    double sum = 0.0, sq = 0.0;
    for (double v : w) {
        sum += v;
        sq += v * v;
    }
    const double n = static_cast<double>(w.size());
    const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
    CHECK(std::abs(sd - 0.1) < 0.005);
    for (double b : p.layers[0].bias) {
        CHECK(b == 0.0);
    }
}

TEST_CASE("init rejects degenerate sizes") {
    Rng rng(1);
    CHECK_THROWS_AS(init_params(std::vector<std::size_t>{4}, Activation::Tanh, rng), ConfigError);
    CHECK_THROWS_AS(init_params(std::vector<std::size_t>{2, 0, 4}, Activation::Tanh, rng), ConfigError);
}

TEST_CASE("zero weights give a uniform prediction") {
    auto p = make({3, 8, 2, 5}, Activation::Tanh, 2);
    zero_all(p);
    const auto t = forward(p, Vector{1.0, -2.0, 0.5});
    for (double v : t.prediction.values) {
        CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
    }
    for (double f : t.feature) {
        CHECK(f == 0.0);
    }
}

TEST_CASE("identity layer and identity head reproduce softmax of the input") {
    ModelParams p;
    p.layers.push_back({Matrix::identity(3), Vector(3, 0.0), Activation::Linear});
    p.head = Matrix::identity(3);
    const Vector x{0.3, -1.0, 2.0};
    const auto t = forward(p, x);
    const auto expected = softmax(LogitVector(x));
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(t.prediction[i] == doctest::Approx(expected[i]).epsilon(1e-15));
    }
}

TEST_CASE("raising a head column along the feature raises that class") {
    auto p = make({2, 16, 2, 4}, Activation::Tanh, 3);
    const Vector x{0.7, -0.4};
    const auto before = forward(p, x);
    const std::size_t j = 2;
    for (std::size_t d = 0; d < p.feature_dim(); ++d) {
        p.head(d, j) += 1e-3 * before.feature[d];
    }
    const auto after = forward(p, x);
    CHECK(after.prediction[j] > before.prediction[j]);
}

TEST_CASE("forward rejects wrong input size") {
    const auto p = make({2, 4, 3}, Activation::Tanh, 1);
    CHECK_THROWS_AS(forward(p, Vector{1.0, 2.0, 3.0}), DimensionError);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
    const auto p = make({2, 6, 2, 3}, Activation::Tanh, 4);
    const auto t = forward(p, Vector{0.1, 0.2});
    const auto g = backward(p, t, Vector(3, 0.0));
    for (double v : flatten(g)) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("head gradient is the outer product of feature and upstream gradient") {
    ModelParams p;
    p.layers.push_back({Matrix(2, 3, 0.25), Vector{0.1, -0.1}, Activation::Linear});
    p.head = Matrix(2, 4, 0.5);
    const Vector x{1.0, 2.0, -1.0};
    const auto t = forward(p, x);
    const Vector up{0.3, -0.2, 0.05, -0.15};
    const auto g = backward(p, t, up);
    for (std::size_t d = 0; d < 2; ++d) {
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(g.head(d, k) == doctest::Approx(up[k] * t.feature[d]).epsilon(1e-15));
        }
    }
}

TEST_CASE("MLP backward matches central differences") {
    for (auto act : {Activation::Tanh, Activation::Relu, Activation::Linear}) {
        CAPTURE(to_string(act));
        Rng rng(100);
        for (int trial = 0; trial < 5; ++trial) {
            auto p = make({3, 7, 5, 4}, act, 200 + static_cast<std::uint64_t>(trial));
            const Vector x{rng.normal(), rng.normal(), rng.normal()};
            const auto tilde_log = log_softmax(random_logits(rng, 4, 2.0));
            const D2Config cfg;
            const auto t = forward(p, x);
            const auto dl = grad_wrt_network_logits(t.prediction, t.log_prediction, tilde_log, cfg);
            const auto analytic = flatten(backward(p, t, dl.values));
            const auto point = flatten(p);
            ModelParams probe = p;
            const auto res = gradient_check(
                [&](std::span<const double> flat) {
                    unflatten(flat, probe);
                    return composed_loss(probe, x, tilde_log, cfg);
                },
                point, analytic, 1e-5);
            CHECK(res.max_relative_error < 1e-6);
        }
    }
}

TEST_CASE("backward_accumulate adds scaled gradients") {
    const auto p = make({2, 4, 2, 3}, Activation::Tanh, 8);
    const auto t = forward(p, Vector{0.5, -0.5});
    const Vector up{0.2, -0.1, -0.1};
    const auto once = flatten(backward(p, t, up));
    auto acc = GradientSet::zeros_like(p);
    backward_accumulate(p, t, up, acc, 0.5);
    backward_accumulate(p, t, up, acc, 0.5);
    const auto twice = flatten(acc);
    for (std::size_t i = 0; i < once.size(); ++i) {
        CHECK(twice[i] == doctest::Approx(once[i]).epsilon(1e-14));
    }
}

TEST_CASE("checkpoint round trip is exact") {
    const auto p = make({2, 16, 2, 4}, Activation::Relu, 21);
    CHECK(decode_checkpoint(encode_checkpoint(p)) == p);
    const auto path = std::filesystem::temp_directory_path() / "d2ssl_model_test.d2ck";
    save_checkpoint(p, path);
    CHECK(load_checkpoint(path) == p);
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint decoding rejects damaged bytes") {
    const auto p = make({2, 4, 3}, Activation::Tanh, 1);
    auto bytes = encode_checkpoint(p);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);
    auto truncated = bytes;
    truncated.pop_back();
    CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);
    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(trailing), FormatError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.d2ck"), IoError);
}

TEST_CASE("activation names round trip") {
    for (auto a : {Activation::Tanh, Activation::Relu, Activation::Linear}) {
        CHECK(parse_activation(to_string(a)) == a);
    }
    CHECK_THROWS_AS(parse_activation("sigmoid"), ConfigError);
}
