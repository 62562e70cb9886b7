#include "d2ssl/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "d2ssl/errors.hpp"

namespace d2ssl {

namespace {

void require_nonempty(std::span<const double> z, const char* what) {
    if (z.empty()) {
        throw DimensionError(std::string(what) + ": empty input");
    }
}

void require_same_length(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw DimensionError(std::string(what) + ": length mismatch " + std::to_string(a) +
                             " vs " + std::to_string(b));
    }
}

std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

} // namespace

LogitVector::LogitVector(Vector v) : values(std::move(v)) {
    if (!all_finite(values)) {
        throw NumericError("LogitVector: non-finite entry");
    }
}

LogitVector::LogitVector(std::initializer_list<double> v) : LogitVector(Vector(v)) {}

double LogitVector::sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }

ProbVector ProbVector::checked(Vector v) {
    require_nonempty(v, "ProbVector");
    double total = 0.0;
    for (double p : v) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw NumericError("ProbVector: entry outside [0, 1]");
        }
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) {
        throw NumericError("ProbVector: entries do not sum to 1");
    }
    return trusted(std::move(v));
}

ProbVector ProbVector::trusted(Vector v) {
    ProbVector p;
    p.values = std::move(v);
    return p;
}

void softmax_into(std::span<const double> z, std::span<double> out) {
    require_nonempty(z, "softmax");
    require_same_length(z.size(), out.size(), "softmax");
    const double m = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - m);
        total += out[i];
    }
    for (double& p : out) {
        p /= total;
    }
}

void log_softmax_into(std::span<const double> z, std::span<double> out) {
    require_nonempty(z, "log_softmax");
    require_same_length(z.size(), out.size(), "log_softmax");
    const double m = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double zi : z) {
        total += std::exp(zi - m);
    }
    const double log_total = std::log(total);
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = z[i] - m - log_total;
    }
}

ProbVector softmax(const LogitVector& z) {
    Vector out(z.size());
    softmax_into(z.values, out);
    return ProbVector::trusted(std::move(out));
}

LogitVector log_softmax(const LogitVector& z) {
    LogitVector out;
    out.values.resize(z.size());
    log_softmax_into(z.values, out.values);
    return out;
}

double clamped_log(double p) { return std::log(std::max(p, kLogClamp)); }

double entropy_from_log(std::span<const double> log_p) {
    double h = 0.0;
    for (double lp : log_p) {
        const double p = std::exp(lp);
        if (p > 0.0) {
            h -= p * lp;
        }
    }
    return std::max(h, 0.0);
}

double entropy(const ProbVector& p) {
    double h = 0.0;
    for (double pi : p.values) {
        if (pi > 0.0) {
            h -= pi * clamped_log(pi);
        }
    }
    return std::max(h, 0.0);
}

double kl_divergence_from_log(std::span<const double> log_p, std::span<const double> log_q) {
    require_same_length(log_p.size(), log_q.size(), "kl_divergence");
    double kl = 0.0;
    for (std::size_t i = 0; i < log_p.size(); ++i) {
        const double p = std::exp(log_p[i]);
        if (p > 0.0) {
            kl += p * (log_p[i] - log_q[i]);
        }
    }
    return std::max(kl, 0.0);
}

double kl_divergence(const ProbVector& p, const ProbVector& q) {
    require_same_length(p.size(), q.size(), "kl_divergence");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) {
            kl += p[i] * (clamped_log(p[i]) - clamped_log(q[i]));
        }
    }
    return std::max(kl, 0.0);
}

std::size_t argmax(std::span<const double> v) {
    require_nonempty(v, "argmax");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) {
            best = i;
        }
    }
    return best;
}

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t state = seed;
    for (auto& word : s_) {
        word = splitmix64(state);
    }
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_normal_;
    }
    double u = 0.0;
    double v = 0.0;
    double s = 0.0;
    do {
        u = 2.0 * uniform() - 1.0;
        v = 2.0 * uniform() - 1.0;
        s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double scale = std::sqrt(-2.0 * std::log(s) / s);
    spare_normal_ = v * scale;
    has_spare_ = true;
    return u * scale;
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) {
        throw DimensionError("Rng::below: empty range");
    }
    // Rejection on the top of the range keeps the draw unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = next_u64();
    while (x >= limit) {
        x = next_u64();
    }
    return x % n;
}

Rng Rng::fork(std::uint64_t tag) const {
    std::uint64_t state = seed_ ^ (tag * 0xD1B54A32D192ED03ULL);
    return Rng(splitmix64(state));
}

} // namespace d2ssl
