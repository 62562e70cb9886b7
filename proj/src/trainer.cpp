#include "d2ssl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <utility>

#include "d2ssl/errors.hpp"

namespace d2ssl {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Stream tags for Rng::fork, one per consumer.
constexpr std::uint64_t kStage1Stream = 1;
constexpr std::uint64_t kStage2Stream = 2;
constexpr std::uint64_t kStage3Stream = 3;

double mean_of(const std::vector<double>& v) {
    if (v.empty()) {
        return kNaN;
    }
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void check_finite_loss(double loss, const std::string& stage, std::size_t epoch) {
    if (!std::isfinite(loss)) {
        throw NumericError("non-finite loss in " + stage + " epoch " + std::to_string(epoch));
    }
}

// Draws labeled ids in shuffled order, reshuffling the whole pool whenever
// fewer than `n` remain, so every batch has the exact labeled count.
class CyclicSampler {
public:
    CyclicSampler(std::vector<std::uint64_t> ids, Rng& rng) : ids_(std::move(ids)), rng_(rng) {
        rng_.shuffle(ids_);
    }

    void draw(std::size_t n, std::vector<std::uint64_t>& out) {
        if (ids_.size() - pos_ < n) {
            rng_.shuffle(ids_);
            pos_ = 0;
        }
        out.insert(out.end(), ids_.begin() + static_cast<std::ptrdiff_t>(pos_),
                   ids_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
    }

private:
    std::vector<std::uint64_t> ids_;
    std::size_t pos_ = 0;
    Rng& rng_;
};

struct HardSample {
    std::uint64_t id;
    int label;
};

// Mean entropy of the network prediction over `ids`.
double mean_prediction_entropy(const SplitDataset& data, const ModelParams& params,
                               const std::vector<std::uint64_t>& ids) {
    std::vector<double> h;
    h.reserve(ids.size());
    for (auto id : ids) {
        h.push_back(entropy_from_log(forward(params, data.sample(id).features).log_prediction.values));
    }
    return mean_of(h);
}

MetricsRecord supervised_record(const SplitDataset& data, const ModelParams& params, const std::string& stage,
                                std::size_t epoch, double lr, double mean_ce,
                                const std::vector<std::uint64_t>& unlabeled) {
    MetricsRecord r;
    r.stage = stage;
    r.epoch = epoch;
    r.lr = lr;
    r.loss_total = mean_ce;
    r.loss_c = mean_ce;
    r.loss_e = kNaN;
    r.acc_labeled = accuracy(data, params, data.ids_with_role(Role::Labeled));
    r.acc_test = accuracy(data, params, data.ids_with_role(Role::Test));
    r.acc_pseudo = kNaN;
    r.mean_H_pseudo = kNaN;
    r.mean_H_pred = mean_prediction_entropy(data, params, unlabeled);
    r.t_abs_p50 = kNaN;
    r.t_abs_p95 = kNaN;
    r.sum_drift_max = kNaN;
    return r;
}

// Shared by stages 1 and 3: cross-entropy against hard labels with a cosine
// schedule over epochs; the last batch of an epoch may be short.
std::vector<MetricsRecord> train_hard_labels(const SplitDataset& data, ModelParams& params,
                                             std::vector<HardSample> pool, const SupervisedStage& stage,
                                             const SchedulePlan& plan, const std::string& tag,
                                             const std::vector<std::uint64_t>& unlabeled, Rng& rng) {
    std::vector<MetricsRecord> metrics;
    if (stage.epochs == 0) {
        return metrics;
    }
    if (pool.empty()) {
        throw ConfigError(tag + ": no training samples");
    }
    const TrainingView view = data.training_view();
    OptimizerState opt = OptimizerState::for_params(params, plan.momentum, plan.weight_decay);
    GradientSet grads = GradientSet::zeros_like(params);
    Vector dlogits(params.num_classes());

    for (std::size_t epoch = 0; epoch < stage.epochs; ++epoch) {
        const double lr = cosine_lr(static_cast<double>(epoch), stage.horizon, stage.lr0);
        rng.shuffle(pool);
        double ce_sum = 0.0;
        for (std::size_t start = 0; start < pool.size(); start += stage.batch) {
            const std::size_t stop = std::min(pool.size(), start + stage.batch);
            const double scale = 1.0 / static_cast<double>(stop - start);
            grads.set_zero();
            for (std::size_t i = start; i < stop; ++i) {
                const auto trace = forward(params, view.features(pool[i].id));
                const auto label = static_cast<std::size_t>(pool[i].label);
                ce_sum -= trace.log_prediction[label];
                for (std::size_t k = 0; k < dlogits.size(); ++k) {
                    dlogits[k] = trace.prediction[k] - (k == label ? 1.0 : 0.0);
                }
                backward_accumulate(params, trace, dlogits, grads, scale);
            }
            check_finite_loss(ce_sum, tag, epoch + 1);
            sgd_nesterov_step(params, grads, opt, lr);
        }
        metrics.push_back(supervised_record(data, params, tag, epoch + 1, lr,
                                            ce_sum / static_cast<double>(pool.size()), unlabeled));
    }
    return metrics;
}

// Pseudo-logit sums recorded at the latest init or reprediction.
std::vector<double> pseudo_sums(const PseudoLabelStore& store) {
    std::vector<double> sums;
    sums.reserve(store.size());
    for (const auto& e : store.entries()) {
        sums.push_back(e.logits.sum());
    }
    return sums;
}

double max_sum_drift(const PseudoLabelStore& store, const std::vector<double>& snapshot) {
    double worst = 0.0;
    const auto entries = store.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!entries[i].frozen) {
            worst = std::max(worst, std::abs(entries[i].logits.sum() - snapshot[i]));
        }
    }
    return worst;
}

MetricsRecord stage2_record(const SplitDataset& data, const ModelParams& params, const PseudoLabelStore& store,
                            const D2Config& cfg, const ActiveSet& active, std::size_t epoch, double lr,
                            const std::vector<LossBreakdown>& losses, double drift) {
    MetricsRecord r;
    r.stage = "stage2";
    r.epoch = epoch;
    r.lr = lr;
    double lt = 0.0, lc = 0.0, le = 0.0;
    for (const auto& l : losses) {
        lt += l.total;
        lc += l.l_c;
        le += l.l_e;
    }
    const double n = static_cast<double>(losses.size());
    r.loss_total = losses.empty() ? kNaN : lt / n;
    r.loss_c = losses.empty() ? kNaN : lc / n;
    r.loss_e = losses.empty() ? kNaN : le / n;
    r.acc_labeled = accuracy(data, params, data.ids_with_role(Role::Labeled));
    r.acc_test = accuracy(data, params, data.ids_with_role(Role::Test));

    std::size_t correct = 0, scored = 0;
    std::vector<double> h_pseudo, h_pred, t_abs;
    for (auto id : active.ids) {
        const auto& entry = store.at(id);
        const LogitVector tilde_log = log_softmax(entry.logits);
        const auto trace = forward(params, data.sample(id).features);
        const LossBreakdown loss = d2_loss(trace.log_prediction, tilde_log, cfg);
        h_pseudo.push_back(entropy_from_log(tilde_log.values));
        h_pred.push_back(loss.l_e);
        t_abs.push_back(std::abs(theorem1_residual(trace.log_prediction, tilde_log, loss, cfg)));
        const int truth = data.sample(id).true_class;
        if (truth != kOodClass) {
            ++scored;
            correct += static_cast<int>(argmax(entry.logits.values)) == truth ? 1 : 0;
        }
    }
    r.acc_pseudo = scored == 0 ? kNaN : static_cast<double>(correct) / static_cast<double>(scored);
    r.mean_H_pseudo = mean_of(h_pseudo);
    r.mean_H_pred = mean_of(h_pred);
    r.t_abs_p50 = quantile(t_abs, 0.5);
    r.t_abs_p95 = quantile(t_abs, 0.95);
    r.sum_drift_max = drift;
    return r;
}

std::string format_field(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

} // namespace

OptimizerState OptimizerState::for_params(const ModelParams& params, double momentum, double weight_decay) {
    OptimizerState s;
    s.buffers = GradientSet::zeros_like(params);
    s.momentum = momentum;
    s.weight_decay = weight_decay;
    return s;
}

void sgd_nesterov_step(ModelParams& params, const GradientSet& grads, OptimizerState& state, double lr) {
    auto p = params.tensors();
    const auto g = grads.tensors();
    auto b = state.buffers.tensors();
    if (p.size() != g.size() || p.size() != b.size()) {
        throw DimensionError("sgd_nesterov_step: tensor count mismatch");
    }
    for (std::size_t t = 0; t < p.size(); ++t) {
        if (p[t].size() != g[t].size() || p[t].size() != b[t].size()) {
            throw DimensionError("sgd_nesterov_step: shape mismatch in tensor " + std::to_string(t));
        }
        for (std::size_t i = 0; i < p[t].size(); ++i) {
            const double grad = g[t][i] + state.weight_decay * p[t][i];
            b[t][i] = state.momentum * b[t][i] + grad;
            p[t][i] -= lr * (grad + state.momentum * b[t][i]);
        }
    }
}

double cosine_lr(double t, double horizon, double lr0) {
    if (!(horizon > 0.0)) {
        throw ScheduleError("cosine_lr: horizon must be positive");
    }
    if (t < 0.0 || t > horizon) {
        throw ScheduleError("cosine_lr: step " + std::to_string(t) + " outside [0, " + std::to_string(horizon) +
                            "]");
    }
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t / horizon));
}

void SchedulePlan::validate() const {
    auto check_stage = [](const SupervisedStage& s, const char* name) {
        if (s.epochs == 0) {
            return;
        }
        if (!(s.lr0 >= 0.0) || !std::isfinite(s.lr0)) {
            throw ConfigError(std::string(name) + "_lr must be >= 0");
        }
        if (s.batch == 0) {
            throw ConfigError(std::string(name) + "_batch must be positive");
        }
        if (!(s.horizon >= static_cast<double>(s.epochs - 1))) {
            throw ConfigError(std::string(name) + "_horizon must cover every epoch (>= epochs - 1)");
        }
    };
    check_stage(stage1, "stage1");
    check_stage(stage3, "stage3");
    for (std::size_t i = 0; i < stage2.size(); ++i) {
        if (!(stage2[i].lr >= 0.0) || !std::isfinite(stage2[i].lr)) {
            throw ConfigError("stage2_lrs entry " + std::to_string(i + 1) + " must be >= 0");
        }
    }
    if (!stage2.empty() && stage2.front().repredict) {
        throw ConfigError("stage2_repredict: the first segment starts from the initial pseudo-labels");
    }
    if (labeled_batch == 0 || unlabeled_batch == 0) {
        throw ConfigError("labeled_batch and unlabeled_batch must be positive");
    }
    if (!(discard_fraction >= 0.0 && discard_fraction < 1.0)) {
        throw ConfigError("discard_fraction must lie in [0, 1)");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw ConfigError("momentum must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
        throw ConfigError("weight_decay must be >= 0");
    }
}

std::string encode_metrics_csv(const std::vector<MetricsRecord>& records) {
    std::string out = "stage,epoch,lr,loss_total,loss_c,loss_e,acc_labeled,acc_test,acc_pseudo,mean_H_pseudo,"
                      "mean_H_pred,t_abs_p50,t_abs_p95,sum_drift_max\n";
    for (const auto& r : records) {
        out += r.stage;
        out += ',';
        out += std::to_string(r.epoch);
        for (double v : {r.lr, r.loss_total, r.loss_c, r.loss_e, r.acc_labeled, r.acc_test, r.acc_pseudo,
                         r.mean_H_pseudo, r.mean_H_pred, r.t_abs_p50, r.t_abs_p95, r.sum_drift_max}) {
            out += ',';
            out += format_field(v);
        }
        out += '\n';
    }
    return out;
}

void write_metrics_csv(const std::vector<MetricsRecord>& records, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    f << encode_metrics_csv(records);
    if (!f) {
        throw IoError("failed writing " + path.string());
    }
}

double accuracy(const SplitDataset& data, const ModelParams& params, const std::vector<std::uint64_t>& ids) {
    std::size_t correct = 0, scored = 0;
    for (auto id : ids) {
        const Sample& s = data.sample(id);
        if (s.true_class == kOodClass) {
            continue;
        }
        ++scored;
        const auto trace = forward(params, s.features);
        correct += static_cast<int>(argmax(trace.logits.values)) == s.true_class ? 1 : 0;
    }
    return scored == 0 ? kNaN : static_cast<double>(correct) / static_cast<double>(scored);
}

double test_error(const SplitDataset& data, const ModelParams& params) {
    return 1.0 - accuracy(data, params, data.ids_with_role(Role::Test));
}

ActiveSet open_world_filter(const PseudoLabelStore& store, double discard_fraction) {
    if (!(discard_fraction >= 0.0 && discard_fraction < 1.0)) {
        throw ConfigError("discard_fraction must lie in [0, 1)");
    }
    std::vector<std::pair<double, std::uint64_t>> scored;
    for (const auto& e : store.entries()) {
        if (!e.frozen) {
            scored.emplace_back(entropy_from_log(log_softmax(e.logits).values), e.id);
        }
    }
    // The small slack keeps products such as 0.1 * 2500 from rounding up past the exact count.
    const auto drop =
        static_cast<std::size_t>(std::ceil(discard_fraction * static_cast<double>(scored.size()) - 1e-9));
    // Highest entropy first; among equal entropies the lower id is kept, so it sorts last.
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) {
            return a.first > b.first;
        }
        return a.second > b.second;
    });
    ActiveSet out;
    for (std::size_t i = 0; i < scored.size(); ++i) {
        (i < drop ? out.discarded : out.ids).push_back(scored[i].second);
    }
    std::sort(out.ids.begin(), out.ids.end());
    std::sort(out.discarded.begin(), out.discarded.end());
    return out;
}

std::vector<MetricsRecord> stage1_supervised(const SplitDataset& data, ModelParams& params, const SchedulePlan& plan,
                                             Rng& rng) {
    const TrainingView view = data.training_view();
    if (view.labeled_ids().empty()) {
        throw ConfigError("stage 1 needs at least one labeled sample");
    }
    std::vector<HardSample> pool;
    for (auto id : view.labeled_ids()) {
        pool.push_back({id, view.label(id)});
    }
    return train_hard_labels(data, params, std::move(pool), plan.stage1, plan, "stage1", view.unlabeled_ids(), rng);
}

Stage2Result stage2_d2(const SplitDataset& data, ModelParams& params, PseudoLabelStore& store,
                       const SchedulePlan& plan, const D2Config& cfg, Rng& rng) {
    Stage2Result result;
    const TrainingView view = data.training_view();
    const auto refilter = [&]() {
        if (plan.open_world) {
            result.final_active = open_world_filter(store, plan.discard_fraction);
            result.filter_events.push_back(result.final_active);
        } else {
            result.final_active = ActiveSet{store.unfrozen_ids(), {}};
        }
    };
    refilter();
    result.last_reset = store;
    if (plan.stage2.empty()) {
        return result;
    }
    if (view.labeled_ids().size() < plan.labeled_batch) {
        throw ConfigError("labeled_batch " + std::to_string(plan.labeled_batch) + " exceeds the labeled pool of " +
                          std::to_string(view.labeled_ids().size()));
    }

    D2Config labeled_cfg = cfg;
    if (!cfg.labeled_entropy) {
        labeled_cfg.beta = 0.0;
    }
    OptimizerState opt = OptimizerState::for_params(params, plan.momentum, plan.weight_decay);
    GradientSet grads = GradientSet::zeros_like(params);
    CyclicSampler labeled(view.labeled_ids(), rng);
    std::vector<double> sum_snapshot = pseudo_sums(store);
    std::size_t epoch_counter = 0;

    std::vector<std::uint64_t> batch;
    std::vector<ForwardTrace> traces;
    std::vector<LossBreakdown> epoch_losses;

    for (const auto& segment : plan.stage2) {
        if (segment.repredict) {
            repredict(store, params, data);
            sum_snapshot = pseudo_sums(store);
            result.last_reset = store;
            refilter();
        }
        std::vector<std::uint64_t> pool = result.final_active.ids;
        if (segment.epochs > 0 && pool.size() < plan.unlabeled_batch) {
            throw ConfigError("unlabeled_batch " + std::to_string(plan.unlabeled_batch) +
                              " exceeds the active unlabeled pool of " + std::to_string(pool.size()));
        }
        for (std::size_t e = 0; e < segment.epochs; ++e) {
            ++epoch_counter;
            rng.shuffle(pool);
            epoch_losses.clear();
            const std::size_t batches = pool.size() / plan.unlabeled_batch;
            for (std::size_t b = 0; b < batches; ++b) {
                batch.clear();
                labeled.draw(plan.labeled_batch, batch);
                const std::size_t n_labeled = batch.size();
                batch.insert(batch.end(), pool.begin() + static_cast<std::ptrdiff_t>(b * plan.unlabeled_batch),
                             pool.begin() + static_cast<std::ptrdiff_t>((b + 1) * plan.unlabeled_batch));

                grads.set_zero();
                traces.clear();
                const double scale = 1.0 / static_cast<double>(batch.size());
                for (std::size_t i = 0; i < batch.size(); ++i) {
                    const D2Config& c = i < n_labeled ? labeled_cfg : cfg;
                    traces.push_back(forward(params, view.features(batch[i])));
                    const auto& trace = traces.back();
                    const LogitVector tilde_log = log_softmax(store.at(batch[i]).logits);
                    const LossBreakdown loss = d2_loss(trace.log_prediction, tilde_log, c);
                    check_finite_loss(loss.total, "stage2", epoch_counter);
                    epoch_losses.push_back(loss);
                    const LogitVector g =
                        grad_wrt_network_logits(trace.prediction, trace.log_prediction, tilde_log, c);
                    backward_accumulate(params, trace, g.values, grads, scale);
                }
                if (!grads.all_finite()) {
                    throw NumericError("non-finite gradient in stage2 epoch " + std::to_string(epoch_counter));
                }
                sgd_nesterov_step(params, grads, opt, segment.lr);
                for (std::size_t i = n_labeled; i < batch.size(); ++i) {
                    d2_update_pseudo(store, batch[i], traces[i].log_prediction, cfg, scale);
                }
            }
            result.metrics.push_back(stage2_record(data, params, store, cfg, result.final_active, epoch_counter,
                                                   segment.lr, epoch_losses, max_sum_drift(store, sum_snapshot)));
        }
    }
    return result;
}

std::vector<MetricsRecord> stage3_finetune(const SplitDataset& data, ModelParams& params,
                                           const PseudoLabelStore& store, const std::vector<std::uint64_t>& unlabeled,
                                           const SchedulePlan& plan, Rng& rng) {
    const TrainingView view = data.training_view();
    std::vector<HardSample> pool;
    for (auto id : view.labeled_ids()) {
        pool.push_back({id, view.label(id)});
    }
    for (auto id : unlabeled) {
        pool.push_back({id, static_cast<int>(argmax(store.at(id).logits.values))});
    }
    return train_hard_labels(data, params, std::move(pool), plan.stage3, plan, "stage3", unlabeled, rng);
}

RunResult run_r2d2(const SplitDataset& data, ModelParams params, const SchedulePlan& plan, const D2Config& cfg,
                   Rng& rng, const RunHooks& hooks) {
    plan.validate();
    cfg.validate();
    RunResult result;
    Rng rng1 = rng.fork(kStage1Stream);
    Rng rng2 = rng.fork(kStage2Stream);
    Rng rng3 = rng.fork(kStage3Stream);

    result.metrics = stage1_supervised(data, params, plan, rng1);
    result.baseline_test_error = test_error(data, params);
    if (hooks.after_stage1) {
        hooks.after_stage1(params);
    }

    PseudoLabelStore store = init_pseudo_labels(data, params, cfg);
    Stage2Result s2 = stage2_d2(data, params, store, plan, cfg, rng2);
    result.metrics.insert(result.metrics.end(), s2.metrics.begin(), s2.metrics.end());
    result.filter_events = std::move(s2.filter_events);
    result.final_pseudo_accuracy = s2.metrics.empty() ? kNaN : s2.metrics.back().acc_pseudo;
    result.final_pseudo_entropy = s2.metrics.empty() ? kNaN : s2.metrics.back().mean_H_pseudo;
    if (hooks.after_stage2) {
        hooks.after_stage2(params, store, s2.last_reset);
    }

    result.stage3_unlabeled = s2.final_active.ids;
    auto s3 = stage3_finetune(data, params, store, s2.final_active.ids, plan, rng3);
    result.metrics.insert(result.metrics.end(), s3.begin(), s3.end());
    result.final_test_error = test_error(data, params);
    result.params = std::move(params);
    result.store = std::move(store);
    return result;
}

void optimize_head_and_pseudo(const SplitDataset& data, ModelParams& params, PseudoLabelStore& store,
                              const D2Config& cfg, const HeadOnlyPlan& plan) {
    const TrainingView view = data.training_view();
    const std::size_t d = params.feature_dim();
    const std::size_t n = params.num_classes();

    struct Row {
        std::uint64_t id;
        bool frozen;
        Vector feature;
    };
    std::vector<Row> rows;
    for (const auto& e : store.entries()) {
        rows.push_back({e.id, e.frozen, extract_features(params, view.features(e.id))});
    }
    if (rows.empty() || plan.steps == 0) {
        return;
    }
    D2Config labeled_cfg = cfg;
    if (!cfg.labeled_entropy) {
        labeled_cfg.beta = 0.0;
    }

    Matrix buffer(d, n);
    Matrix grad(d, n);
    LogitVector logits(Vector(n, 0.0));
    std::vector<LogitVector> hat_logs(rows.size());
    const double scale = 1.0 / static_cast<double>(rows.size());

    for (std::size_t step = 0; step < plan.steps; ++step) {
        std::fill(grad.data().begin(), grad.data().end(), 0.0);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const Vector& f = rows[r].feature;
            for (std::size_t k = 0; k < n; ++k) {
                double acc = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    acc += params.head(j, k) * f[j];
                }
                logits[k] = acc;
            }
            hat_logs[r] = log_softmax(logits);
            const ProbVector p_hat = ProbVector::trusted(softmax(logits).values);
            const LogitVector tilde_log = log_softmax(store.at(rows[r].id).logits);
            const D2Config& c = rows[r].frozen ? labeled_cfg : cfg;
            check_finite_loss(d2_loss(hat_logs[r], tilde_log, c).total, "head-only", step + 1);
            const LogitVector g = grad_wrt_network_logits(p_hat, hat_logs[r], tilde_log, c);
            for (std::size_t j = 0; j < d; ++j) {
                for (std::size_t k = 0; k < n; ++k) {
                    grad(j, k) += scale * g[k] * f[j];
                }
            }
        }
        auto w = params.head.data();
        auto gw = grad.data();
        auto bw = buffer.data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = gw[i] + plan.weight_decay * w[i];
            bw[i] = plan.momentum * bw[i] + gi;
            w[i] -= plan.lr * (gi + plan.momentum * bw[i]);
        }
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (!rows[r].frozen) {
                d2_update_pseudo(store, rows[r].id, hat_logs[r], cfg, scale);
            }
        }
    }
}

} // namespace d2ssl
