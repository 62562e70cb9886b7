#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "d2ssl/data.hpp"
#include "d2ssl/model.hpp"
#include "d2ssl/pseudo.hpp"

namespace d2ssl {

struct GradientCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    Vector numeric;
};

/// Central differences of `loss` around `point`, compared with `analytic`.
/// Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
GradientCheckResult gradient_check(const std::function<double(std::span<const double>)>& loss,
                                   std::span<const double> point, std::span<const double> analytic, double step);

/// Fixed-range histogram; values outside [lower, upper] land in the edge bins.
struct HistogramSpec {
    double lower = -0.5;
    double upper = 0.5;
    std::size_t bins = 101;
    std::vector<std::size_t> counts;

    void add(double value);
    std::size_t total() const;
    double bin_center(std::size_t i) const;
};

struct ResidualSample {
    std::uint64_t id = 0;
    std::size_t predicted = 0;  ///< n = argmax p_hat
    double p_hat_n = 0.0;
    double p_tilde_n = 0.0;
    LossBreakdown loss;
    double t = 0.0;
};

/// Per-sample quantities for every unfrozen sample (or `ids` when given).
std::vector<ResidualSample> score_residuals(const SplitDataset& data, const ModelParams& params,
                                            const PseudoLabelStore& store, const D2Config& cfg,
                                            const std::vector<std::uint64_t>* ids = nullptr);

struct TReport {
    HistogramSpec histogram;
    double tolerance = 1e-3;
    double fraction_within = 0.0;  ///< share of samples with |t| < tolerance
    std::size_t scored = 0;
};

TReport t_histogram(const std::vector<ResidualSample>& samples, HistogramSpec spec, double tolerance = 1e-3);

struct FlatnessRecord {
    ResidualSample sample;
    double bound = 0.0;  ///< exp(-L / beta)
    bool above_curve = false;  ///< p_hat_n >= bound - 1e-6
    bool flattened = false;    ///< p_tilde_n <= p_hat_n + 1e-6
    bool converged = false;    ///< |t| < convergence tolerance
};

struct FlatnessReport {
    std::vector<FlatnessRecord> records;
    std::size_t converged = 0;
    std::size_t below_curve = 0;               ///< all samples
    std::size_t not_flattened = 0;             ///< all samples
    std::size_t converged_below_curve = 0;
    std::size_t converged_not_flattened = 0;
    std::size_t link_within = 0;  ///< converged samples matching the exponential link to 1e-3
};

/// Throws ConfigError when beta == 0 since the bound exp(-L/beta) is undefined.
FlatnessReport flatness_audit(const std::vector<ResidualSample>& samples, const D2Config& cfg,
                              double convergence_tolerance = 1e-4);

/// p_tilde_n predicted from p_hat_n and L when t = 0.
double exponential_link(double p_hat_n, double loss, const D2Config& cfg);

/// For each threshold e, the number of entropies strictly below e.
/// Throws ConfigError unless the grid is strictly increasing.
std::vector<std::size_t> entropy_cdf(std::span<const double> entropies, std::span<const double> grid);

std::vector<double> pseudo_entropies(const PseudoLabelStore& store, const std::vector<std::uint64_t>& ids);
std::vector<double> prediction_entropies(const SplitDataset& data, const ModelParams& params,
                                         const std::vector<std::uint64_t>& ids);

struct DriftRow {
    std::uint64_t id = 0;
    double sum_reference = 0.0;
    double sum_now = 0.0;
    double drift = 0.0;
    double norm_logits = 0.0;    ///< ||y_tilde||_2
    double norm_gradient = 0.0;  ///< ||dL/dy_tilde||_2, NaN unless magnitudes attached
};

struct DriftAudit {
    std::vector<DriftRow> rows;
    double max_drift = 0.0;
};

/// |sum y_tilde now - sum y_tilde at reference| over unfrozen samples.
DriftAudit sum_drift_audit(const PseudoLabelStore& store, const PseudoLabelStore& reference);
/// Fills norm_gradient from the current network predictions.
void attach_gradient_norms(DriftAudit& audit, const SplitDataset& data, const ModelParams& params,
                           const PseudoLabelStore& store, const D2Config& cfg);

struct FeatureRow {
    std::uint64_t id = 0;
    Role role = Role::Unlabeled;
    int true_class = 0;
    double f0 = 0.0;
    double f1 = 0.0;
    std::size_t predicted = 0;
};

struct FeatureExport {
    std::vector<FeatureRow> rows;
    bool truncated = false;  ///< feature dimension was above 2
};

FeatureExport export_features(const SplitDataset& data, const ModelParams& params);

/// Mean distance of samples to their true-class centroid in feature space;
/// OOD samples are ignored.
double mean_intra_class_distance(const FeatureExport& features);

void write_histogram_csv(const TReport& report, const std::filesystem::path& path);
void write_flatness_csv(const FlatnessReport& report, const std::filesystem::path& path);
void write_entropy_cdf_csv(std::span<const double> grid, const std::vector<std::size_t>& pseudo,
                           const std::vector<std::size_t>& prediction, const std::filesystem::path& path);
void write_drift_csv(const DriftAudit& audit, const std::filesystem::path& path);
void write_features_csv(const FeatureExport& features, const std::filesystem::path& path);

} // namespace d2ssl
