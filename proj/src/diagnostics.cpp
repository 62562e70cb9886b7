#include "d2ssl/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include "d2ssl/errors.hpp"

namespace d2ssl {

namespace {

std::string num(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    return f;
}

void finish(std::ofstream& f, const std::filesystem::path& path) {
    f.flush();
    if (!f) {
        throw IoError("failed writing " + path.string());
    }
}

} // namespace

GradientCheckResult gradient_check(const std::function<double(std::span<const double>)>& loss,
                                   std::span<const double> point, std::span<const double> analytic, double step) {
    if (point.size() != analytic.size()) {
        throw DimensionError("gradient_check: point and analytic gradient differ in length");
    }
    if (!(step > 0.0)) {
        throw ConfigError("gradient_check: step must be positive");
    }
    GradientCheckResult out;
    out.numeric.resize(point.size());
    Vector x(point.begin(), point.end());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + step;
        const double up = loss(x);
        x[i] = orig - step;
        const double down = loss(x);
        x[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("gradient_check: non-finite loss at coordinate " + std::to_string(i));
        }
        out.numeric[i] = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(analytic[i]), std::abs(out.numeric[i]), 1e-8});
        const double rel = std::abs(analytic[i] - out.numeric[i]) / denom;
        if (rel > out.max_relative_error) {
            out.max_relative_error = rel;
            out.worst_index = i;
        }
    }
    return out;
}

void HistogramSpec::add(double value) {
    if (counts.size() != bins) {
        counts.assign(bins, 0);
    }
    const double width = (upper - lower) / static_cast<double>(bins);
    const double pos = std::floor((value - lower) / width);
    const double clamped = std::clamp(pos, 0.0, static_cast<double>(bins - 1));
    ++counts[static_cast<std::size_t>(clamped)];
}

std::size_t HistogramSpec::total() const {
    std::size_t t = 0;
    for (auto c : counts) {
        t += c;
    }
    return t;
}

double HistogramSpec::bin_center(std::size_t i) const {
    const double width = (upper - lower) / static_cast<double>(bins);
    return lower + (static_cast<double>(i) + 0.5) * width;
}

std::vector<ResidualSample> score_residuals(const SplitDataset& data, const ModelParams& params,
                                            const PseudoLabelStore& store, const D2Config& cfg,
                                            const std::vector<std::uint64_t>* ids) {
    const std::vector<std::uint64_t> all = ids ? *ids : store.unfrozen_ids();
    std::vector<ResidualSample> out;
    out.reserve(all.size());
    for (auto id : all) {
        const auto trace = forward(params, data.sample(id).features);
        const LogitVector tilde_log = log_softmax(store.at(id).logits);
        ResidualSample s;
        s.id = id;
        s.loss = d2_loss(trace.log_prediction, tilde_log, cfg);
        s.predicted = argmax(trace.log_prediction.values);
        s.p_hat_n = std::exp(trace.log_prediction[s.predicted]);
        s.p_tilde_n = std::exp(tilde_log[s.predicted]);
        s.t = theorem1_residual(trace.log_prediction, tilde_log, s.loss, cfg);
        out.push_back(s);
    }
    return out;
}

TReport t_histogram(const std::vector<ResidualSample>& samples, HistogramSpec spec, double tolerance) {
    if (spec.bins == 0 || !(spec.upper > spec.lower)) {
        throw ConfigError("histogram needs at least one bin and upper > lower");
    }
    spec.counts.assign(spec.bins, 0);
    TReport r;
    r.tolerance = tolerance;
    std::size_t within = 0;
    for (const auto& s : samples) {
        spec.add(s.t);
        within += std::abs(s.t) < tolerance ? 1 : 0;
    }
    r.scored = samples.size();
    r.fraction_within =
        samples.empty() ? 0.0 : static_cast<double>(within) / static_cast<double>(samples.size());
    r.histogram = std::move(spec);
    return r;
}

double exponential_link(double p_hat_n, double loss, const D2Config& cfg) {
    return std::exp(-loss / cfg.alpha) * std::pow(p_hat_n, 1.0 - cfg.beta / cfg.alpha);
}

FlatnessReport flatness_audit(const std::vector<ResidualSample>& samples, const D2Config& cfg,
                              double convergence_tolerance) {
    if (cfg.beta == 0.0) {
        throw ConfigError("flatness_audit: beta must be positive, exp(-L/beta) is undefined at 0");
    }
    FlatnessReport r;
    r.records.reserve(samples.size());
    for (const auto& s : samples) {
        FlatnessRecord rec;
        rec.sample = s;
        rec.bound = std::exp(-s.loss.total / cfg.beta);
        rec.above_curve = s.p_hat_n >= rec.bound - 1e-6;
        rec.flattened = s.p_tilde_n <= s.p_hat_n + 1e-6;
        rec.converged = std::abs(s.t) < convergence_tolerance;
        r.below_curve += rec.above_curve ? 0 : 1;
        r.not_flattened += rec.flattened ? 0 : 1;
        if (rec.converged) {
            ++r.converged;
            r.converged_below_curve += rec.above_curve ? 0 : 1;
            r.converged_not_flattened += rec.flattened ? 0 : 1;
            const double link = exponential_link(s.p_hat_n, s.loss.total, cfg);
            r.link_within += std::abs(s.p_tilde_n - link) < 1e-3 ? 1 : 0;
        }
        r.records.push_back(rec);
    }
    return r;
}

std::vector<std::size_t> entropy_cdf(std::span<const double> entropies, std::span<const double> grid) {
    for (std::size_t i = 1; i < grid.size(); ++i) {
        if (!(grid[i] > grid[i - 1])) {
            throw ConfigError("entropy_cdf: grid must be strictly increasing");
        }
    }
    std::vector<double> sorted(entropies.begin(), entropies.end());
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> counts;
    counts.reserve(grid.size());
    for (double e : grid) {
        counts.push_back(static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), e) - sorted.begin()));
    }
    return counts;
}

std::vector<double> pseudo_entropies(const PseudoLabelStore& store, const std::vector<std::uint64_t>& ids) {
    std::vector<double> out;
    out.reserve(ids.size());
    for (auto id : ids) {
        out.push_back(entropy_from_log(log_softmax(store.at(id).logits).values));
    }
    return out;
}

std::vector<double> prediction_entropies(const SplitDataset& data, const ModelParams& params,
                                         const std::vector<std::uint64_t>& ids) {
    std::vector<double> out;
    out.reserve(ids.size());
    for (auto id : ids) {
        out.push_back(entropy_from_log(forward(params, data.sample(id).features).log_prediction.values));
    }
    return out;
}

DriftAudit sum_drift_audit(const PseudoLabelStore& store, const PseudoLabelStore& reference) {
    DriftAudit audit;
    for (const auto& e : store.entries()) {
        if (e.frozen) {
            continue;
        }
        DriftRow row;
        row.id = e.id;
        row.sum_now = e.logits.sum();
        row.sum_reference = reference.contains(e.id) ? reference.at(e.id).logits.sum() : row.sum_now;
        row.drift = std::abs(row.sum_now - row.sum_reference);
        double sq = 0.0;
        for (double v : e.logits.values) {
            sq += v * v;
        }
        row.norm_logits = std::sqrt(sq);
        row.norm_gradient = std::numeric_limits<double>::quiet_NaN();
        audit.max_drift = std::max(audit.max_drift, row.drift);
        audit.rows.push_back(row);
    }
    return audit;
}

void attach_gradient_norms(DriftAudit& audit, const SplitDataset& data, const ModelParams& params,
                           const PseudoLabelStore& store, const D2Config& cfg) {
    for (auto& row : audit.rows) {
        const auto trace = forward(params, data.sample(row.id).features);
        const LogitVector g = grad_wrt_pseudo_logits(trace.log_prediction, log_softmax(store.at(row.id).logits), cfg);
        double sq = 0.0;
        for (double v : g.values) {
            sq += v * v;
        }
        row.norm_gradient = std::sqrt(sq);
    }
}

FeatureExport export_features(const SplitDataset& data, const ModelParams& params) {
    FeatureExport out;
    out.truncated = params.feature_dim() > 2;
    out.rows.reserve(data.size());
    for (const auto& s : data.samples()) {
        const auto trace = forward(params, s.features);
        FeatureRow row;
        row.id = s.id;
        row.role = s.role;
        row.true_class = s.true_class;
        row.f0 = trace.feature.empty() ? 0.0 : trace.feature[0];
        row.f1 = trace.feature.size() > 1 ? trace.feature[1] : 0.0;
        row.predicted = argmax(trace.logits.values);
        out.rows.push_back(row);
    }
    return out;
}

double mean_intra_class_distance(const FeatureExport& features) {
    std::map<int, std::pair<double, double>> sums;
    std::map<int, std::size_t> counts;
    for (const auto& r : features.rows) {
        if (r.true_class == kOodClass) {
            continue;
        }
        sums[r.true_class].first += r.f0;
        sums[r.true_class].second += r.f1;
        ++counts[r.true_class];
    }
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& r : features.rows) {
        if (r.true_class == kOodClass) {
            continue;
        }
        const double c = static_cast<double>(counts[r.true_class]);
        const double dx = r.f0 - sums[r.true_class].first / c;
        const double dy = r.f1 - sums[r.true_class].second / c;
        total += std::sqrt(dx * dx + dy * dy);
        ++n;
    }
    return n == 0 ? std::numeric_limits<double>::quiet_NaN() : total / static_cast<double>(n);
}

void write_histogram_csv(const TReport& report, const std::filesystem::path& path) {
    auto f = open_csv(path);
    f << "bin,center,count\n";
    for (std::size_t i = 0; i < report.histogram.counts.size(); ++i) {
        f << i << ',' << num(report.histogram.bin_center(i)) << ',' << report.histogram.counts[i] << '\n';
    }
    finish(f, path);
}

void write_flatness_csv(const FlatnessReport& report, const std::filesystem::path& path) {
    auto f = open_csv(path);
    f << "id,n,p_hat_n,p_tilde_n,loss,bound,t,above_curve,flattened,converged\n";
    for (const auto& r : report.records) {
        f << r.sample.id << ',' << r.sample.predicted << ',' << num(r.sample.p_hat_n) << ','
          << num(r.sample.p_tilde_n) << ',' << num(r.sample.loss.total) << ',' << num(r.bound) << ','
          << num(r.sample.t) << ',' << (r.above_curve ? 1 : 0) << ',' << (r.flattened ? 1 : 0) << ','
          << (r.converged ? 1 : 0) << '\n';
    }
    finish(f, path);
}

void write_entropy_cdf_csv(std::span<const double> grid, const std::vector<std::size_t>& pseudo,
                           const std::vector<std::size_t>& prediction, const std::filesystem::path& path) {
    auto f = open_csv(path);
    f << "threshold,count_pseudo,count_pred\n";
    for (std::size_t i = 0; i < grid.size(); ++i) {
        f << num(grid[i]) << ',' << (i < pseudo.size() ? pseudo[i] : 0) << ','
          << (i < prediction.size() ? prediction[i] : 0) << '\n';
    }
    finish(f, path);
}

void write_drift_csv(const DriftAudit& audit, const std::filesystem::path& path) {
    auto f = open_csv(path);
    f << "id,sum_reference,sum_now,drift,norm_logits,norm_gradient\n";
    for (const auto& r : audit.rows) {
        f << r.id << ',' << num(r.sum_reference) << ',' << num(r.sum_now) << ',' << num(r.drift) << ','
          << num(r.norm_logits) << ',' << num(r.norm_gradient) << '\n';
    }
    finish(f, path);
}

void write_features_csv(const FeatureExport& features, const std::filesystem::path& path) {
    auto f = open_csv(path);
    f << "# feature_dim_truncated=" << (features.truncated ? 1 : 0) << '\n';
    f << "id,role,class,f0,f1,predicted\n";
    for (const auto& r : features.rows) {
        f << r.id << ',' << to_string(r.role) << ',';
        if (r.true_class != kOodClass) {
            f << r.true_class;
        }
        f << ',' << num(r.f0) << ',' << num(r.f1) << ',' << r.predicted << '\n';
    }
    finish(f, path);
}

} // namespace d2ssl
