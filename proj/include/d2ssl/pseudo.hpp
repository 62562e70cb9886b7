#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "d2ssl/data.hpp"
#include "d2ssl/model.hpp"
#include "d2ssl/numerics.hpp"

namespace d2ssl {

/// Choice of L_c. ForwardKl is KL(p_hat || p_tilde); the other two are
/// the ablation variants KL(p_tilde || p_hat) and ||p_tilde - p_hat||^2.
enum class ClassificationLoss { ForwardKl, ReverseKl, SquaredL2 };

ClassificationLoss parse_classification_loss(std::string_view name);
std::string_view to_string(ClassificationLoss loss);

struct D2Config {
    double alpha = 0.1;
    double beta = 0.03;
    double lambda = 4000.0;  ///< step size of the pseudo-logit update
    double K = 10.0;         ///< labeled pseudo-logits are K * one_hot(y)
    ClassificationLoss classification_loss = ClassificationLoss::ForwardKl;
    /// Whether labeled samples in joint training also carry the entropy term.
    bool labeled_entropy = true;

    /// Throws ConfigError on invalid values; returns warnings (alpha <= beta).
    std::vector<std::string> validate() const;
};

struct LossBreakdown {
    double l_c = 0.0;
    double l_e = 0.0;
    double total = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
};

/// Per-sample pseudo-logits. Labeled records are frozen at K * one_hot.
class PseudoLabelStore {
public:
    struct Entry {
        std::uint64_t id = 0;
        LogitVector logits;
        bool frozen = false;

        friend bool operator==(const Entry&, const Entry&) = default;
    };

    PseudoLabelStore(std::size_t num_classes, double init_scale);

    std::size_t num_classes() const { return num_classes_; }
    double init_scale() const { return init_scale_; }
    std::size_t size() const { return entries_.size(); }

    void add_labeled(std::uint64_t id, int true_class);
    void add_unlabeled(std::uint64_t id, LogitVector logits);

    bool contains(std::uint64_t id) const;
    const Entry& at(std::uint64_t id) const;
    std::span<const Entry> entries() const { return entries_; }
    std::vector<std::uint64_t> unfrozen_ids() const;

    /// Overwrites an unfrozen record; throws FrozenUpdateError on frozen ones.
    void set_logits(std::uint64_t id, LogitVector logits);

    friend bool operator==(const PseudoLabelStore&, const PseudoLabelStore&) = default;

private:
    Entry& find(std::uint64_t id);
    const Entry* lookup(std::uint64_t id) const;

    std::size_t num_classes_;
    double init_scale_;
    std::vector<Entry> entries_;  // sorted by id
};

/// Labeled samples get K * one_hot (frozen); unlabeled get the current logits.
PseudoLabelStore init_pseudo_labels(const SplitDataset& data, const ModelParams& params, const D2Config& cfg);

/// L = alpha * L_c + beta * L_e from log p_hat and log p_tilde.
LossBreakdown d2_loss(const LogitVector& p_hat_log, const LogitVector& p_tilde_log, const D2Config& cfg);

/// dL/d(network logits). For ForwardKl this is p_hat_k (g_k - L) with
/// g_k = (alpha - beta) log p_hat_k - alpha log p_tilde_k.
LogitVector grad_wrt_network_logits(const ProbVector& p_hat, const LogitVector& p_hat_log,
                                    const LogitVector& p_tilde_log, const D2Config& cfg);

/// dL/d(pseudo-logits) in closed form for the configured L_c.
LogitVector grad_wrt_pseudo_logits(const LogitVector& p_hat_log, const LogitVector& p_tilde_log,
                                   const D2Config& cfg);
/// Probability-space overload; logs are clamped at kLogClamp.
LogitVector grad_wrt_pseudo_logits(const ProbVector& p_hat, const ProbVector& p_tilde, const D2Config& cfg);

/// y_tilde <- y_tilde - lambda * grad_scale * dL/dy_tilde. Plain step: no
/// momentum, no decay. Batch training passes grad_scale = 1/B because the
/// optimised objective is the batch mean of the per-sample loss.
const PseudoLabelStore::Entry& d2_update_pseudo(PseudoLabelStore& store, std::uint64_t id,
                                                const LogitVector& p_hat_log, const D2Config& cfg,
                                                double grad_scale = 1.0);
const PseudoLabelStore::Entry& d2_update_pseudo(PseudoLabelStore& store, std::uint64_t id,
                                                const ProbVector& p_hat, const D2Config& cfg,
                                                double grad_scale = 1.0);

/// Overwrites every unfrozen record with the current network logits.
void repredict(PseudoLabelStore& store, const ModelParams& params, const SplitDataset& data);

/// t(n) = (alpha - beta) log p_hat_n - alpha log p_tilde_n - L, n = argmax p_hat.
double theorem1_residual(const LogitVector& p_hat_log, const LogitVector& p_tilde_log, const LossBreakdown& loss,
                         const D2Config& cfg);

/// Snapshot layout (little-endian): "D2PL", u32 version, u32 N, u64 count,
/// then per record u64 id, u8 frozen, N x f64 pseudo-logits.
std::vector<char> encode_pseudo_snapshot(const PseudoLabelStore& store);
PseudoLabelStore decode_pseudo_snapshot(std::span<const char> bytes, double init_scale);
void save_pseudo_snapshot(const PseudoLabelStore& store, const std::filesystem::path& path);
PseudoLabelStore load_pseudo_snapshot(const std::filesystem::path& path, double init_scale);

} // namespace d2ssl
