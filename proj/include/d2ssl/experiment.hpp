#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "d2ssl/data.hpp"
#include "d2ssl/model.hpp"
#include "d2ssl/pseudo.hpp"
#include "d2ssl/trainer.hpp"

namespace d2ssl {

enum class Mode { R2D2, SupervisedBaseline, Ablation, Diagnose };

Mode parse_mode(std::string_view name);
std::string_view to_string(Mode mode);

/// Every knob of a run. Defaults reproduce the reference synthetic setup:
/// four Gaussian blobs, 20 labeled / 2000 unlabeled / 2000 test samples.
struct ExperimentConfig {
    Mode mode = Mode::R2D2;
    std::uint64_t seed = 1;
    std::string out;

    // data
    std::string dataset = "gaussians";  ///< gaussians | moons | idx
    std::size_t classes = 4;
    std::size_t gauss_dim = 2;
    double gauss_radius = 3.0;
    double gauss_spread = 1.0;
    double moons_noise = 0.1;
    std::size_t labeled_per_class = 5;
    std::size_t unlabeled_per_class = 500;
    std::size_t test_per_class = 500;
    std::string idx_images;
    std::string idx_labels;
    std::string idx_test_images;
    std::string idx_test_labels;
    double test_fraction = 0.2;
    std::vector<std::size_t> unbalance_counts;
    double ood_fraction = 0.0;  ///< share of the unlabeled pool drawn out of distribution
    double ood_spread = 1.0;

    // model
    std::vector<std::size_t> hidden_sizes;  ///< empty means the dataset default
    Activation activation = Activation::Tanh;

    D2Config d2;
    SchedulePlan plan;

    // diagnose mode
    std::string checkpoint;
    std::string pseudo_snapshot;
    HeadOnlyPlan head_only{0, 1.0, 0.9, 0.0};
    double t_tolerance = 1e-3;
    double converged_tolerance = 1e-4;
    std::size_t t_bins = 101;
    double t_lower = -0.5;
    double t_upper = 0.5;
    std::size_t entropy_grid = 50;

    // ablation mode
    std::vector<std::string> ablation_axes{"strategy", "alpha", "beta", "lambda", "loss"};
    std::size_t ablation_jobs = 1;

    /// Hidden sizes after applying the dataset default (64,2 synthetic; 256,64 idx).
    std::vector<std::size_t> resolved_hidden() const;
    /// Warnings from validation (alpha <= beta and the like).
    std::vector<std::string> warnings;
};

/// Parses `key = value` lines (`#` starts a comment), then applies the
/// overrides in order. Throws ConfigError naming the key and line.
ExperimentConfig parse_config(const std::string& text,
                              const std::vector<std::pair<std::string, std::string>>& overrides = {});

/// Every key with its effective value, one `key = value` per line.
std::string format_config(const ExperimentConfig& config);

/// Names of all recognised keys in output order.
std::vector<std::string> config_keys();

SplitDataset build_dataset(const ExperimentConfig& config);
ModelParams build_model(const ExperimentConfig& config, const SplitDataset& data);

struct AblationCell {
    std::string name;
    std::string axis;
    std::string value;
    ExperimentConfig config;
};

/// One-factor-at-a-time cells over the selected axes.
std::vector<AblationCell> ablation_cells(const ExperimentConfig& base);

/// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;

/// Runs the configured mode into `config.out`; never throws.
int run(const ExperimentConfig& config);

/// Runs the mode and lets errors escape; used by `run` and by tests.
void run_or_throw(const ExperimentConfig& config);

} // namespace d2ssl
