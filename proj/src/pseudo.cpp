#include "d2ssl/pseudo.hpp"

#include <algorithm>
#include <cmath>

#include "binary_io.hpp"
#include "d2ssl/errors.hpp"

namespace d2ssl {

namespace {

constexpr char kSnapshotMagic[4] = {'D', '2', 'P', 'L'};
constexpr std::uint32_t kSnapshotVersion = 1;

void require_same(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw DimensionError(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " +
                             std::to_string(b));
    }
}

Vector exp_of(std::span<const double> logs) {
    Vector out(logs.size());
    std::transform(logs.begin(), logs.end(), out.begin(), [](double v) { return std::exp(v); });
    return out;
}

LogitVector clamped_logs(const ProbVector& p) {
    LogitVector out;
    out.values.resize(p.size());
    std::transform(p.values.begin(), p.values.end(), out.values.begin(), clamped_log);
    return out;
}

// dH/dy_k = -p_k (log p_k + H)
void add_entropy_grad(std::span<const double> p, std::span<const double> log_p, double weight, Vector& grad) {
    double h = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
        h -= p[k] * log_p[k];
    }
    for (std::size_t k = 0; k < p.size(); ++k) {
        grad[k] -= weight * p[k] * (log_p[k] + h);
    }
}

} // namespace

ClassificationLoss parse_classification_loss(std::string_view name) {
    if (name == "forward_kl") {
        return ClassificationLoss::ForwardKl;
    }
    if (name == "reverse_kl") {
        return ClassificationLoss::ReverseKl;
    }
    if (name == "squared_l2") {
        return ClassificationLoss::SquaredL2;
    }
    throw ConfigError("unknown classification loss '" + std::string(name) +
                      "' (expected forward_kl, reverse_kl or squared_l2)");
}

std::string_view to_string(ClassificationLoss loss) {
    switch (loss) {
    case ClassificationLoss::ForwardKl:
        return "forward_kl";
    case ClassificationLoss::ReverseKl:
        return "reverse_kl";
    case ClassificationLoss::SquaredL2:
        return "squared_l2";
    }
    return "?";
}

std::vector<std::string> D2Config::validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) {
        throw ConfigError("alpha must be > 0");
    }
    if (!(beta >= 0.0) || !std::isfinite(beta)) {
        throw ConfigError("beta must be >= 0");
    }
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw ConfigError("lambda must be >= 0");
    }
    if (!std::isfinite(K)) {
        throw ConfigError("K must be finite");
    }
    std::vector<std::string> warnings;
    if (alpha <= beta) {
        warnings.push_back("alpha <= beta: the exponent 1 - beta/alpha is not positive, "
                           "pseudo-labels and predictions are expected to disagree");
    }
    return warnings;
}

PseudoLabelStore::PseudoLabelStore(std::size_t num_classes, double init_scale)
    : num_classes_(num_classes), init_scale_(init_scale) {
    if (num_classes_ == 0) {
        throw ConfigError("PseudoLabelStore: class count must be positive");
    }
}

const PseudoLabelStore::Entry* PseudoLabelStore::lookup(std::uint64_t id) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), id,
                               [](const Entry& e, std::uint64_t key) { return e.id < key; });
    return (it != entries_.end() && it->id == id) ? &*it : nullptr;
}

PseudoLabelStore::Entry& PseudoLabelStore::find(std::uint64_t id) {
    const Entry* e = lookup(id);
    if (e == nullptr) {
        throw std::out_of_range("PseudoLabelStore: no record for sample " + std::to_string(id));
    }
    return const_cast<Entry&>(*e);
}

bool PseudoLabelStore::contains(std::uint64_t id) const { return lookup(id) != nullptr; }

const PseudoLabelStore::Entry& PseudoLabelStore::at(std::uint64_t id) const {
    return const_cast<PseudoLabelStore*>(this)->find(id);
}

std::vector<std::uint64_t> PseudoLabelStore::unfrozen_ids() const {
    std::vector<std::uint64_t> ids;
    for (const auto& e : entries_) {
        if (!e.frozen) {
            ids.push_back(e.id);
        }
    }
    return ids;
}

namespace {

void insert_sorted(std::vector<PseudoLabelStore::Entry>& entries, PseudoLabelStore::Entry entry) {
    auto it = std::lower_bound(entries.begin(), entries.end(), entry.id,
                               [](const PseudoLabelStore::Entry& e, std::uint64_t key) { return e.id < key; });
    if (it != entries.end() && it->id == entry.id) {
        throw std::invalid_argument("PseudoLabelStore: duplicate sample " + std::to_string(entry.id));
    }
    entries.insert(it, std::move(entry));
}

} // namespace

void PseudoLabelStore::add_labeled(std::uint64_t id, int true_class) {
    if (true_class < 0 || static_cast<std::size_t>(true_class) >= num_classes_) {
        throw ConfigError("PseudoLabelStore: class " + std::to_string(true_class) + " out of range");
    }
    LogitVector logits(Vector(num_classes_, 0.0));
    logits[static_cast<std::size_t>(true_class)] = init_scale_;
    insert_sorted(entries_, Entry{id, std::move(logits), true});
}

void PseudoLabelStore::add_unlabeled(std::uint64_t id, LogitVector logits) {
    require_same(logits.size(), num_classes_, "PseudoLabelStore::add_unlabeled");
    insert_sorted(entries_, Entry{id, std::move(logits), false});
}

void PseudoLabelStore::set_logits(std::uint64_t id, LogitVector logits) {
    auto& e = find(id);
    if (e.frozen) {
        throw FrozenUpdateError("pseudo-logits of labeled sample " + std::to_string(id) + " are frozen");
    }
    require_same(logits.size(), num_classes_, "PseudoLabelStore::set_logits");
    e.logits = std::move(logits);
}

PseudoLabelStore init_pseudo_labels(const SplitDataset& data, const ModelParams& params, const D2Config& cfg) {
    if (data.num_classes() != params.num_classes()) {
        throw ConfigError("init_pseudo_labels: dataset has " + std::to_string(data.num_classes()) +
                          " classes, head produces " + std::to_string(params.num_classes()));
    }
    PseudoLabelStore store(data.num_classes(), cfg.K);
    const TrainingView view = data.training_view();
    for (std::uint64_t id : view.labeled_ids()) {
        store.add_labeled(id, view.label(id));
    }
    for (std::uint64_t id : view.unlabeled_ids()) {
        store.add_unlabeled(id, forward(params, view.features(id)).logits);
    }
    return store;
}

LossBreakdown d2_loss(const LogitVector& p_hat_log, const LogitVector& p_tilde_log, const D2Config& cfg) {
    require_same(p_hat_log.size(), p_tilde_log.size(), "d2_loss");
    LossBreakdown out;
    out.alpha = cfg.alpha;
    out.beta = cfg.beta;
    out.l_e = entropy_from_log(p_hat_log.values);
    switch (cfg.classification_loss) {
    case ClassificationLoss::ForwardKl:
        out.l_c = kl_divergence_from_log(p_hat_log.values, p_tilde_log.values);
        break;
    case ClassificationLoss::ReverseKl:
        out.l_c = kl_divergence_from_log(p_tilde_log.values, p_hat_log.values);
        break;
    case ClassificationLoss::SquaredL2: {
        double acc = 0.0;
        for (std::size_t j = 0; j < p_hat_log.size(); ++j) {
            const double d = std::exp(p_tilde_log[j]) - std::exp(p_hat_log[j]);
            acc += d * d;
        }
        out.l_c = acc;
        break;
    }
    }
    out.total = cfg.alpha * out.l_c + cfg.beta * out.l_e;
    return out;
}

LogitVector grad_wrt_network_logits(const ProbVector& p_hat, const LogitVector& p_hat_log,
                                    const LogitVector& p_tilde_log, const D2Config& cfg) {
    const std::size_t n = p_hat.size();
    require_same(n, p_hat_log.size(), "grad_wrt_network_logits");
    require_same(n, p_tilde_log.size(), "grad_wrt_network_logits");
    Vector grad(n, 0.0);
    switch (cfg.classification_loss) {
    case ClassificationLoss::ForwardKl: {
        Vector g(n);
        double loss = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            g[k] = (cfg.alpha - cfg.beta) * p_hat_log[k] - cfg.alpha * p_tilde_log[k];
            loss += p_hat[k] * g[k];
        }
        for (std::size_t k = 0; k < n; ++k) {
            grad[k] = p_hat[k] * (g[k] - loss);
        }
        break;
    }
    case ClassificationLoss::ReverseKl: {
        for (std::size_t k = 0; k < n; ++k) {
            grad[k] = cfg.alpha * (p_hat[k] - std::exp(p_tilde_log[k]));
        }
        add_entropy_grad(p_hat.values, p_hat_log.values, cfg.beta, grad);
        break;
    }
    case ClassificationLoss::SquaredL2: {
        const Vector p_tilde = exp_of(p_tilde_log.values);
        double mean_diff = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mean_diff += p_hat[j] * (p_tilde[j] - p_hat[j]);
        }
        for (std::size_t k = 0; k < n; ++k) {
            grad[k] = -2.0 * cfg.alpha * p_hat[k] * ((p_tilde[k] - p_hat[k]) - mean_diff);
        }
        add_entropy_grad(p_hat.values, p_hat_log.values, cfg.beta, grad);
        break;
    }
    }
    return LogitVector(std::move(grad));
}

LogitVector grad_wrt_pseudo_logits(const LogitVector& p_hat_log, const LogitVector& p_tilde_log,
                                   const D2Config& cfg) {
    const std::size_t n = p_hat_log.size();
    require_same(n, p_tilde_log.size(), "grad_wrt_pseudo_logits");
    const Vector p_hat = exp_of(p_hat_log.values);
    const Vector p_tilde = exp_of(p_tilde_log.values);
    Vector grad(n);
    switch (cfg.classification_loss) {
    case ClassificationLoss::ForwardKl:
        for (std::size_t k = 0; k < n; ++k) {
            grad[k] = cfg.alpha * (p_tilde[k] - p_hat[k]);
        }
        break;
    case ClassificationLoss::ReverseKl: {
        double kl = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            kl += p_tilde[k] * (p_tilde_log[k] - p_hat_log[k]);
        }
        for (std::size_t k = 0; k < n; ++k) {
            grad[k] = cfg.alpha * p_tilde[k] * (p_tilde_log[k] - p_hat_log[k] - kl);
        }
        break;
    }
    case ClassificationLoss::SquaredL2: {
        double mean_diff = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            mean_diff += p_tilde[k] * (p_tilde[k] - p_hat[k]);
        }
        for (std::size_t k = 0; k < n; ++k) {
            grad[k] = 2.0 * cfg.alpha * p_tilde[k] * (p_tilde[k] - p_hat[k] - mean_diff);
        }
        break;
    }
    }
    return LogitVector(std::move(grad));
}

LogitVector grad_wrt_pseudo_logits(const ProbVector& p_hat, const ProbVector& p_tilde, const D2Config& cfg) {
    require_same(p_hat.size(), p_tilde.size(), "grad_wrt_pseudo_logits");
    return grad_wrt_pseudo_logits(clamped_logs(p_hat), clamped_logs(p_tilde), cfg);
}

const PseudoLabelStore::Entry& d2_update_pseudo(PseudoLabelStore& store, std::uint64_t id,
                                                const LogitVector& p_hat_log, const D2Config& cfg,
                                                double grad_scale) {
    const auto& entry = store.at(id);
    if (entry.frozen) {
        throw FrozenUpdateError("pseudo-logits of labeled sample " + std::to_string(id) + " are frozen");
    }
    require_same(p_hat_log.size(), store.num_classes(), "d2_update_pseudo");
    const LogitVector grad = grad_wrt_pseudo_logits(p_hat_log, log_softmax(entry.logits), cfg);
    Vector next = entry.logits.values;
    for (std::size_t k = 0; k < next.size(); ++k) {
        next[k] -= cfg.lambda * grad_scale * grad[k];
    }
    store.set_logits(id, LogitVector(std::move(next)));
    return store.at(id);
}

const PseudoLabelStore::Entry& d2_update_pseudo(PseudoLabelStore& store, std::uint64_t id, const ProbVector& p_hat,
                                                const D2Config& cfg, double grad_scale) {
    return d2_update_pseudo(store, id, clamped_logs(p_hat), cfg, grad_scale);
}

void repredict(PseudoLabelStore& store, const ModelParams& params, const SplitDataset& data) {
    const TrainingView view = data.training_view();
    for (std::uint64_t id : store.unfrozen_ids()) {
        store.set_logits(id, forward(params, view.features(id)).logits);
    }
}

double theorem1_residual(const LogitVector& p_hat_log, const LogitVector& p_tilde_log, const LossBreakdown& loss,
                         const D2Config& cfg) {
    require_same(p_hat_log.size(), p_tilde_log.size(), "theorem1_residual");
    const std::size_t n = argmax(p_hat_log.values);
    // Grouped so that identical distributions cancel the alpha term exactly.
    return cfg.alpha * (p_hat_log[n] - p_tilde_log[n]) - cfg.beta * p_hat_log[n] - loss.total;
}

std::vector<char> encode_pseudo_snapshot(const PseudoLabelStore& store) {
    detail::ByteWriter w;
    w.bytes(kSnapshotMagic);
    w.u32_le(kSnapshotVersion);
    w.u32_le(static_cast<std::uint32_t>(store.num_classes()));
    w.u64_le(store.size());
    for (const auto& e : store.entries()) {
        w.u64_le(e.id);
        w.u8(e.frozen ? 1 : 0);
        for (double v : e.logits.values) {
            w.f64_le(v);
        }
    }
    return std::move(w.buffer());
}

PseudoLabelStore decode_pseudo_snapshot(std::span<const char> bytes, double init_scale) {
    detail::ByteReader r(bytes, "pseudo-label snapshot");
    const auto magic = r.bytes(4);
    if (!std::equal(magic.begin(), magic.end(), std::begin(kSnapshotMagic))) {
        throw FormatError("pseudo-label snapshot: bad magic (expected D2PL)");
    }
    const std::uint32_t version = r.u32_le();
    if (version != kSnapshotVersion) {
        throw FormatError("pseudo-label snapshot: unsupported version " + std::to_string(version));
    }
    const std::uint32_t n = r.u32_le();
    const std::uint64_t count = r.u64_le();
    if (n == 0 || count > r.remaining() / (9 + 8 * static_cast<std::uint64_t>(n))) {
        throw FormatError("pseudo-label snapshot: header does not match payload size");
    }
    PseudoLabelStore store(n, init_scale);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t id = r.u64_le();
        const std::uint8_t frozen = r.u8();
        if (frozen > 1) {
            throw FormatError("pseudo-label snapshot: bad frozen flag");
        }
        Vector logits(n);
        for (auto& v : logits) {
            v = r.f64_le();
        }
        if (frozen != 0) {
            store.add_labeled(id, static_cast<int>(argmax(logits)));
            if (store.at(id).logits.values != logits) {
                throw FormatError("pseudo-label snapshot: frozen record " + std::to_string(id) +
                                  " is not K * one_hot for the configured K");
            }
        } else {
            store.add_unlabeled(id, LogitVector(std::move(logits)));
        }
    }
    if (r.remaining() != 0) {
        throw FormatError("pseudo-label snapshot: trailing bytes");
    }
    return store;
}

void save_pseudo_snapshot(const PseudoLabelStore& store, const std::filesystem::path& path) {
    detail::write_file(path, encode_pseudo_snapshot(store));
}

PseudoLabelStore load_pseudo_snapshot(const std::filesystem::path& path, double init_scale) {
    const auto bytes = detail::read_file(path);
    return decode_pseudo_snapshot(bytes, init_scale);
}

} // namespace d2ssl
