#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace d2ssl {

using Vector = std::vector<double>;

/// Unnormalised scores over N classes (network logits or pseudo-logits),
/// also used for log-probabilities. Entries are finite.
struct LogitVector {
    Vector values;

    LogitVector() = default;
    explicit LogitVector(Vector v);
    LogitVector(std::initializer_list<double> v);

    std::size_t size() const { return values.size(); }
    double operator[](std::size_t i) const { return values[i]; }
    double& operator[](std::size_t i) { return values[i]; }
    std::span<const double> view() const { return values; }
    double sum() const;

    friend bool operator==(const LogitVector&, const LogitVector&) = default;
};

/// A distribution over N classes: entries in [0, 1] summing to 1.
struct ProbVector {
    Vector values;

    ProbVector() = default;
    /// Validates the simplex invariants (sum within 1e-12).
    static ProbVector checked(Vector v);
    /// Trusted construction for values produced by softmax-family code.
    static ProbVector trusted(Vector v);

    std::size_t size() const { return values.size(); }
    double operator[](std::size_t i) const { return values[i]; }
    std::span<const double> view() const { return values; }
};

ProbVector softmax(const LogitVector& z);
LogitVector log_softmax(const LogitVector& z);

void softmax_into(std::span<const double> z, std::span<double> out);
void log_softmax_into(std::span<const double> z, std::span<double> out);

/// Entropy -sum p log p from log-probabilities; 0 log 0 = 0.
double entropy_from_log(std::span<const double> log_p);
/// Entropy from probabilities, clamping below at kLogClamp before the log.
double entropy(const ProbVector& p);

/// KL(p || q) with both arguments given as log-probabilities.
double kl_divergence_from_log(std::span<const double> log_p, std::span<const double> log_q);
double kl_divergence(const ProbVector& p, const ProbVector& q);

/// Smallest probability fed to std::log when only probabilities are known.
inline constexpr double kLogClamp = 1e-300;

double clamped_log(double p);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> v);

bool all_finite(std::span<const double> v);

/// Linearly interpolated quantile (q in [0, 1]); NaN for empty input.
double quantile(std::vector<double> values, double q);

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    static Matrix identity(std::size_t n);

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Vector data_;
};

/// xoshiro256** seeded through splitmix64. Period 2^256 - 1; the output
/// sequence depends only on the seed, so runs reproduce across platforms.
/// Uniform, normal and shuffle are implemented here rather than with
/// <random> distributions, whose outputs are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t next_u64();
    /// Uniform double in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi);
    /// Standard normal via the Marsaglia polar method.
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    /// Uniform integer in [0, n), n > 0, without modulo bias.
    std::uint64_t below(std::uint64_t n);

    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }
    template <typename T>
    void shuffle(std::vector<T>& items) { shuffle(std::span<T>(items)); }

    /// An independent stream derived from this generator's seed and a tag.
    Rng fork(std::uint64_t tag) const;

private:
    std::uint64_t seed_;
    std::array<std::uint64_t, 4> s_{};
    double spare_normal_ = 0.0;
    bool has_spare_ = false;
};

} // namespace d2ssl
