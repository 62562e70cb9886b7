#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "d2ssl/data.hpp"
#include "d2ssl/model.hpp"
#include "d2ssl/pseudo.hpp"

namespace d2ssl {

/// Nesterov momentum buffers plus coefficients. Pseudo-logits never pass
/// through this optimizer.
struct OptimizerState {
    GradientSet buffers;
    double momentum = 0.9;
    double weight_decay = 2e-4;

    static OptimizerState for_params(const ModelParams& params, double momentum, double weight_decay);
};

/// grad += wd * param; buf = mu * buf + grad; param -= lr * (grad + mu * buf).
void sgd_nesterov_step(ModelParams& params, const GradientSet& grads, OptimizerState& state, double lr);

/// lr0 * (1 + cos(pi * t / T)) / 2 for 0 <= t <= T. Throws ScheduleError otherwise.
double cosine_lr(double t, double horizon, double lr0);

struct SupervisedStage {
    std::size_t epochs = 0;
    double lr0 = 0.0;
    double horizon = 1.0;  ///< cosine horizon in epochs
    std::size_t batch = 1;
};

struct Stage2Segment {
    std::size_t epochs = 0;
    double lr = 0.0;  ///< constant within the segment
    bool repredict = false;

    friend bool operator==(const Stage2Segment&, const Stage2Segment&) = default;
};

struct SchedulePlan {
    SupervisedStage stage1{200, 0.05, 233.0, 4};
    std::vector<Stage2Segment> stage2{{50, 0.05, false}, {50, 0.04, true}, {50, 0.03, true}, {50, 0.02, true}};
    std::size_t labeled_batch = 8;
    std::size_t unlabeled_batch = 24;
    SupervisedStage stage3{100, 0.01, 100.0, 64};
    bool open_world = false;
    double discard_fraction = 0.1;
    double momentum = 0.9;
    double weight_decay = 2e-4;

    /// Throws ConfigError on negative or inconsistent values.
    void validate() const;
};

/// One row of the metrics log. Fields that a stage does not define are NaN.
struct MetricsRecord {
    std::string stage;
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss_total = 0.0;
    double loss_c = 0.0;
    double loss_e = 0.0;
    double acc_labeled = 0.0;
    double acc_test = 0.0;
    double acc_pseudo = 0.0;
    double mean_H_pseudo = 0.0;
    double mean_H_pred = 0.0;
    double t_abs_p50 = 0.0;
    double t_abs_p95 = 0.0;
    double sum_drift_max = 0.0;
};

std::string encode_metrics_csv(const std::vector<MetricsRecord>& records);
void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path);

/// Accuracy of argmax prediction against hidden classes; NaN for empty sets.
/// Samples of class kOodClass are skipped.
double accuracy(const SplitDataset& data, const ModelParams& params, const std::vector<std::uint64_t>& ids);
double test_error(const SplitDataset& data, const ModelParams& params);

/// Unlabeled samples taking part in stage 2 after the most recent filter pass.
struct ActiveSet {
    std::vector<std::uint64_t> ids;        ///< ascending
    std::vector<std::uint64_t> discarded;  ///< ascending
};

/// Drops the ceil(fraction * count) unfrozen samples with the highest
/// pseudo-label entropy; ties keep the lower id.
ActiveSet open_world_filter(const PseudoLabelStore& store, double discard_fraction);

/// Cross-entropy training on labeled samples only.
std::vector<MetricsRecord> stage1_supervised(const SplitDataset& data, ModelParams& params, const SchedulePlan& plan,
                                             Rng& rng);

struct Stage2Result {
    std::vector<MetricsRecord> metrics;
    std::vector<ActiveSet> filter_events;  ///< one per filter pass when open_world is on
    ActiveSet final_active;
    /// Store as it stood after init or the latest reprediction.
    PseudoLabelStore last_reset{1, 0.0};
};

/// Joint training of network and pseudo-logits, segment by segment.
Stage2Result stage2_d2(const SplitDataset& data, ModelParams& params, PseudoLabelStore& store,
                       const SchedulePlan& plan, const D2Config& cfg, Rng& rng);

/// Hard-label finetune: true class for labeled samples, argmax of the
/// pseudo-label for `unlabeled` samples. The store is read-only here.
std::vector<MetricsRecord> stage3_finetune(const SplitDataset& data, ModelParams& params,
                                           const PseudoLabelStore& store, const std::vector<std::uint64_t>& unlabeled,
                                           const SchedulePlan& plan, Rng& rng);

struct RunHooks {
    std::function<void(const ModelParams&)> after_stage1;
    /// Receives the store at the end of stage 2 and at its latest reset.
    std::function<void(const ModelParams&, const PseudoLabelStore&, const PseudoLabelStore&)> after_stage2;
};

struct RunResult {
    ModelParams params;
    PseudoLabelStore store{1, 0.0};
    std::vector<MetricsRecord> metrics;
    std::vector<ActiveSet> filter_events;
    std::vector<std::uint64_t> stage3_unlabeled;
    double baseline_test_error = 0.0;  ///< after stage 1
    double final_test_error = 0.0;
    double final_pseudo_accuracy = 0.0;  ///< last stage-2 epoch, NaN if stage 2 is empty
    double final_pseudo_entropy = 0.0;
};

/// Stage 1, pseudo-label init, stage 2, stage 3.
RunResult run_r2d2(const SplitDataset& data, ModelParams params, const SchedulePlan& plan, const D2Config& cfg,
                   Rng& rng, const RunHooks& hooks = {});

struct HeadOnlyPlan {
    std::size_t steps = 5000;
    double lr = 1.0;
    double momentum = 0.9;
    double weight_decay = 0.0;
};

/// Full-batch optimisation of the head W and the pseudo-logits with the
/// backbone frozen. Uses every labeled and unfrozen sample in the store.
void optimize_head_and_pseudo(const SplitDataset& data, ModelParams& params, PseudoLabelStore& store,
                              const D2Config& cfg, const HeadOnlyPlan& plan);

} // namespace d2ssl
