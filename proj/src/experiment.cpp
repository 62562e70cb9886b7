#include "d2ssl/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "d2ssl/diagnostics.hpp"
#include "d2ssl/errors.hpp"

namespace d2ssl {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

// Rng::fork tags for the independent streams of one run.
constexpr std::uint64_t kDataStream = 0xDA7A;
constexpr std::uint64_t kModelStream = 0x30DE1;
constexpr std::uint64_t kTrainStream = 0x7A1;

// ---------------------------------------------------------------- parsing

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

struct BadValue {
    std::string what;
};

double to_real(std::string_view s) {
    s = trim(s);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty() || !std::isfinite(v)) {
        throw BadValue{"expected a real number, got '" + std::string(s) + "'"};
    }
    return v;
}

std::uint64_t to_uint(std::string_view s) {
    s = trim(s);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
        throw BadValue{"expected a non-negative integer, got '" + std::string(s) + "'"};
    }
    return v;
}

bool to_bool(std::string_view s) {
    s = trim(s);
    if (s == "true" || s == "1" || s == "yes" || s == "on") {
        return true;
    }
    if (s == "false" || s == "0" || s == "no" || s == "off") {
        return false;
    }
    throw BadValue{"expected true or false, got '" + std::string(s) + "'"};
}

std::vector<std::string_view> list_items(std::string_view s) {
    std::vector<std::string_view> items;
    s = trim(s);
    if (s.empty()) {
        return items;
    }
    std::size_t start = 0;
    while (true) {
        const auto comma = s.find(',', start);
        items.push_back(trim(s.substr(start, comma == std::string_view::npos ? s.npos : comma - start)));
        if (comma == std::string_view::npos) {
            break;
        }
        start = comma + 1;
    }
    return items;
}

template <typename T, typename F>
std::vector<T> to_list(std::string_view s, F convert) {
    std::vector<T> out;
    for (auto item : list_items(s)) {
        out.push_back(static_cast<T>(convert(item)));
    }
    return out;
}

std::string fmt_real(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

template <typename T, typename F>
std::string fmt_list(const std::vector<T>& items, F fmt) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        out += (i ? "," : "");
        out += fmt(items[i]);
    }
    return out;
}

std::string fmt_uint(std::uint64_t v) { return std::to_string(v); }
std::string fmt_bool(bool v) { return v ? "true" : "false"; }

// Stage-2 lists are read separately and combined once every key is known.
struct Stage2Lists {
    std::vector<std::size_t> epochs;
    std::vector<double> lrs;
    std::vector<bool> repredict;
};

struct KeySpec {
    const char* name;
    std::function<void(ExperimentConfig&, Stage2Lists&, std::string_view)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

template <typename Field>
KeySpec real_key(const char* name, Field field) {
    return {name, [field](ExperimentConfig& c, Stage2Lists&, std::string_view v) { field(c) = to_real(v); },
            [field](const ExperimentConfig& c) { return fmt_real(field(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Field>
KeySpec uint_key(const char* name, Field field) {
    return {name,
            [field](ExperimentConfig& c, Stage2Lists&, std::string_view v) {
                field(c) = static_cast<std::remove_reference_t<decltype(field(c))>>(to_uint(v));
            },
            [field](const ExperimentConfig& c) { return fmt_uint(field(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Field>
KeySpec string_key(const char* name, Field field) {
    return {name, [field](ExperimentConfig& c, Stage2Lists&, std::string_view v) { field(c) = std::string(trim(v)); },
            [field](const ExperimentConfig& c) { return field(const_cast<ExperimentConfig&>(c)); }};
}

template <typename Field>
KeySpec bool_key(const char* name, Field field) {
    return {name, [field](ExperimentConfig& c, Stage2Lists&, std::string_view v) { field(c) = to_bool(v); },
            [field](const ExperimentConfig& c) { return fmt_bool(field(const_cast<ExperimentConfig&>(c))); }};
}

template <typename E, typename Parse>
E parse_enum(std::string_view v, Parse parse) {
    try {
        return parse(trim(v));
    } catch (const ConfigError& e) {
        throw BadValue{e.what()};
    }
}

const std::vector<KeySpec>& registry() {
    static const std::vector<KeySpec> keys = [] {
        std::vector<KeySpec> k;
        k.push_back({"mode",
                     [](ExperimentConfig& c, Stage2Lists&, std::string_view v) {
                         c.mode = parse_enum<Mode>(v, parse_mode);
                     },
                     [](const ExperimentConfig& c) { return std::string(to_string(c.mode)); }});
        k.push_back(uint_key("seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.seed; }));
        k.push_back(string_key("out", [](ExperimentConfig& c) -> std::string& { return c.out; }));

        k.push_back(string_key("dataset", [](ExperimentConfig& c) -> std::string& { return c.dataset; }));
        k.push_back(uint_key("classes", [](ExperimentConfig& c) -> std::size_t& { return c.classes; }));
        k.push_back(uint_key("gauss_dim", [](ExperimentConfig& c) -> std::size_t& { return c.gauss_dim; }));
        k.push_back(real_key("gauss_radius", [](ExperimentConfig& c) -> double& { return c.gauss_radius; }));
        k.push_back(real_key("gauss_spread", [](ExperimentConfig& c) -> double& { return c.gauss_spread; }));
        k.push_back(real_key("moons_noise", [](ExperimentConfig& c) -> double& { return c.moons_noise; }));
        k.push_back(
            uint_key("labeled_per_class", [](ExperimentConfig& c) -> std::size_t& { return c.labeled_per_class; }));
        k.push_back(uint_key("unlabeled_per_class",
                             [](ExperimentConfig& c) -> std::size_t& { return c.unlabeled_per_class; }));
        k.push_back(uint_key("test_per_class", [](ExperimentConfig& c) -> std::size_t& { return c.test_per_class; }));
        k.push_back(string_key("idx_images", [](ExperimentConfig& c) -> std::string& { return c.idx_images; }));
        k.push_back(string_key("idx_labels", [](ExperimentConfig& c) -> std::string& { return c.idx_labels; }));
        k.push_back(
            string_key("idx_test_images", [](ExperimentConfig& c) -> std::string& { return c.idx_test_images; }));
        k.push_back(
            string_key("idx_test_labels", [](ExperimentConfig& c) -> std::string& { return c.idx_test_labels; }));
        k.push_back(real_key("test_fraction", [](ExperimentConfig& c) -> double& { return c.test_fraction; }));
        k.push_back({"unbalance_counts",
                     [](ExperimentConfig& c, Stage2Lists&, std::string_view v) {
                         c.unbalance_counts = to_list<std::size_t>(v, to_uint);
                     },
                     [](const ExperimentConfig& c) { return fmt_list(c.unbalance_counts, fmt_uint); }});
        k.push_back(real_key("ood_fraction", [](ExperimentConfig& c) -> double& { return c.ood_fraction; }));
        k.push_back(real_key("ood_spread", [](ExperimentConfig& c) -> double& { return c.ood_spread; }));

        k.push_back({"hidden_sizes",
                     [](ExperimentConfig& c, Stage2Lists&, std::string_view v) {
                         c.hidden_sizes =
                             trim(v) == "auto" ? std::vector<std::size_t>{} : to_list<std::size_t>(v, to_uint);
                     },
                     [](const ExperimentConfig& c) { return fmt_list(c.resolved_hidden(), fmt_uint); }});
        k.push_back({"activation",
                     [](ExperimentConfig& c, Stage2Lists&, std::string_view v) {
                         c.activation = parse_enum<Activation>(v, parse_activation);
                     },
                     [](const ExperimentConfig& c) { return std::string(to_string(c.activation)); }});

        k.push_back(real_key("alpha", [](ExperimentConfig& c) -> double& { return c.d2.alpha; }));
        k.push_back(real_key("beta", [](ExperimentConfig& c) -> double& { return c.d2.beta; }));
        k.push_back(real_key("lambda", [](ExperimentConfig& c) -> double& { return c.d2.lambda; }));
        k.push_back(real_key("K", [](ExperimentConfig& c) -> double& { return c.d2.K; }));
        k.push_back({"classification_loss",
                     [](ExperimentConfig& c, Stage2Lists&, std::string_view v) {
                         c.d2.classification_loss = parse_enum<ClassificationLoss>(v, parse_classification_loss);
                     },
                     [](const ExperimentConfig& c) { return std::string(to_string(c.d2.classification_loss)); }});
        k.push_back(bool_key("labeled_entropy", [](ExperimentConfig& c) -> bool& { return c.d2.labeled_entropy; }));

        k.push_back(real_key("momentum", [](ExperimentConfig& c) -> double& { return c.plan.momentum; }));
        k.push_back(real_key("weight_decay", [](ExperimentConfig& c) -> double& { return c.plan.weight_decay; }));
        k.push_back(uint_key("stage1_epochs", [](ExperimentConfig& c) -> std::size_t& { return c.plan.stage1.epochs; }));
        k.push_back(real_key("stage1_lr", [](ExperimentConfig& c) -> double& { return c.plan.stage1.lr0; }));
        k.push_back(real_key("stage1_horizon", [](ExperimentConfig& c) -> double& { return c.plan.stage1.horizon; }));
        k.push_back(uint_key("stage1_batch", [](ExperimentConfig& c) -> std::size_t& { return c.plan.stage1.batch; }));
        k.push_back({"stage2_epochs",
                     [](ExperimentConfig&, Stage2Lists& s, std::string_view v) {
                         s.epochs = to_list<std::size_t>(v, to_uint);
                     },
                     [](const ExperimentConfig& c) {
                         std::vector<std::uint64_t> e;
                         for (const auto& seg : c.plan.stage2) {
                             e.push_back(seg.epochs);
                         }
                         return fmt_list(e, fmt_uint);
                     }});
        k.push_back({"stage2_lrs",
                     [](ExperimentConfig&, Stage2Lists& s, std::string_view v) { s.lrs = to_list<double>(v, to_real); },
                     [](const ExperimentConfig& c) {
                         std::vector<double> e;
                         for (const auto& seg : c.plan.stage2) {
                             e.push_back(seg.lr);
                         }
                         return fmt_list(e, fmt_real);
                     }});
        k.push_back({"stage2_repredict",
                     [](ExperimentConfig&, Stage2Lists& s, std::string_view v) {
                         s.repredict = to_list<bool>(v, to_bool);
                     },
                     [](const ExperimentConfig& c) {
                         std::vector<std::uint64_t> e;
                         for (const auto& seg : c.plan.stage2) {
                             e.push_back(seg.repredict ? 1 : 0);
                         }
                         return fmt_list(e, fmt_uint);
                     }});
        k.push_back(uint_key("labeled_batch", [](ExperimentConfig& c) -> std::size_t& { return c.plan.labeled_batch; }));
        k.push_back(
            uint_key("unlabeled_batch", [](ExperimentConfig& c) -> std::size_t& { return c.plan.unlabeled_batch; }));
        k.push_back(uint_key("stage3_epochs", [](ExperimentConfig& c) -> std::size_t& { return c.plan.stage3.epochs; }));
        k.push_back(real_key("stage3_lr", [](ExperimentConfig& c) -> double& { return c.plan.stage3.lr0; }));
        k.push_back(real_key("stage3_horizon", [](ExperimentConfig& c) -> double& { return c.plan.stage3.horizon; }));
        k.push_back(uint_key("stage3_batch", [](ExperimentConfig& c) -> std::size_t& { return c.plan.stage3.batch; }));
        k.push_back(bool_key("open_world", [](ExperimentConfig& c) -> bool& { return c.plan.open_world; }));
        k.push_back(
            real_key("discard_fraction", [](ExperimentConfig& c) -> double& { return c.plan.discard_fraction; }));

        k.push_back(string_key("checkpoint", [](ExperimentConfig& c) -> std::string& { return c.checkpoint; }));
        k.push_back(
            string_key("pseudo_snapshot", [](ExperimentConfig& c) -> std::string& { return c.pseudo_snapshot; }));
        k.push_back(
            uint_key("head_only_steps", [](ExperimentConfig& c) -> std::size_t& { return c.head_only.steps; }));
        k.push_back(real_key("head_only_lr", [](ExperimentConfig& c) -> double& { return c.head_only.lr; }));
        k.push_back(
            real_key("head_only_momentum", [](ExperimentConfig& c) -> double& { return c.head_only.momentum; }));
        k.push_back(real_key("t_tolerance", [](ExperimentConfig& c) -> double& { return c.t_tolerance; }));
        k.push_back(
            real_key("converged_tolerance", [](ExperimentConfig& c) -> double& { return c.converged_tolerance; }));
        k.push_back(uint_key("t_bins", [](ExperimentConfig& c) -> std::size_t& { return c.t_bins; }));
        k.push_back(real_key("t_lower", [](ExperimentConfig& c) -> double& { return c.t_lower; }));
        k.push_back(real_key("t_upper", [](ExperimentConfig& c) -> double& { return c.t_upper; }));
        k.push_back(uint_key("entropy_grid", [](ExperimentConfig& c) -> std::size_t& { return c.entropy_grid; }));

        k.push_back({"ablation_axes",
                     [](ExperimentConfig& c, Stage2Lists&, std::string_view v) {
                         c.ablation_axes.clear();
                         for (auto item : list_items(v)) {
                             c.ablation_axes.emplace_back(item);
                         }
                     },
                     [](const ExperimentConfig& c) {
                         return fmt_list(c.ablation_axes, [](const std::string& s) { return s; });
                     }});
        k.push_back(uint_key("ablation_jobs", [](ExperimentConfig& c) -> std::size_t& { return c.ablation_jobs; }));
        return k;
    }();
    return keys;
}

const KeySpec* find_key(std::string_view name) {
    for (const auto& k : registry()) {
        if (name == k.name) {
            return &k;
        }
    }
    return nullptr;
}

void combine_stage2(ExperimentConfig& c, const Stage2Lists& lists) {
    const bool any = !lists.epochs.empty() || !lists.lrs.empty() || !lists.repredict.empty();
    if (!any) {
        return;
    }
    const std::size_t n = c.plan.stage2.size();
    std::vector<std::size_t> epochs = lists.epochs;
    std::vector<double> lrs = lists.lrs;
    std::vector<bool> rep = lists.repredict;
    // A list left unset keeps its default only when the segment count is unchanged.
    const std::size_t target = std::max({epochs.size(), lrs.size(), rep.size()});
    auto fill_default = [&](auto& v, auto get) {
        if (v.empty() && target == n) {
            for (const auto& seg : c.plan.stage2) {
                v.push_back(get(seg));
            }
        }
    };
    fill_default(epochs, [](const Stage2Segment& s) { return s.epochs; });
    fill_default(lrs, [](const Stage2Segment& s) { return s.lr; });
    fill_default(rep, [](const Stage2Segment& s) { return s.repredict; });
    if (epochs.size() != target || lrs.size() != target || rep.size() != target) {
        throw ConfigError("stage2_epochs, stage2_lrs and stage2_repredict must list the same number of segments (" +
                          std::to_string(epochs.size()) + ", " + std::to_string(lrs.size()) + ", " +
                          std::to_string(rep.size()) + ")");
    }
    c.plan.stage2.clear();
    for (std::size_t i = 0; i < target; ++i) {
        c.plan.stage2.push_back({epochs[i], lrs[i], rep[i]});
    }
}

void validate(ExperimentConfig& c) {
    if (c.dataset != "gaussians" && c.dataset != "moons" && c.dataset != "idx") {
        throw ConfigError("key 'dataset': expected gaussians, moons or idx, got '" + c.dataset + "'");
    }
    if (c.dataset == "gaussians" && c.classes < 2) {
        throw ConfigError("key 'classes': need at least 2 classes");
    }
    if (c.dataset == "gaussians" && c.gauss_dim < 2) {
        throw ConfigError("key 'gauss_dim': need at least 2 dimensions");
    }
    if (!(c.gauss_spread >= 0.0) || !(c.moons_noise >= 0.0) || !(c.ood_spread >= 0.0)) {
        throw ConfigError("spreads and noise levels must be >= 0");
    }
    if (c.labeled_per_class == 0) {
        throw ConfigError("key 'labeled_per_class': must be positive");
    }
    if (c.dataset != "idx" && c.test_per_class == 0) {
        throw ConfigError("key 'test_per_class': must be positive");
    }
    if (c.dataset == "idx" && (c.idx_images.empty() || c.idx_labels.empty())) {
        throw ConfigError("dataset idx needs 'idx_images' and 'idx_labels'");
    }
    if (c.idx_test_images.empty() != c.idx_test_labels.empty()) {
        throw ConfigError("'idx_test_images' and 'idx_test_labels' must be given together");
    }
    if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) {
        throw ConfigError("key 'test_fraction': must lie in (0, 1)");
    }
    if (!(c.ood_fraction >= 0.0 && c.ood_fraction < 1.0)) {
        throw ConfigError("key 'ood_fraction': must lie in [0, 1)");
    }
    for (auto h : c.hidden_sizes) {
        if (h == 0) {
            throw ConfigError("key 'hidden_sizes': sizes must be positive");
        }
    }
    c.warnings = c.d2.validate();
    c.plan.validate();
    if (!(c.head_only.lr >= 0.0) || !(c.head_only.momentum >= 0.0 && c.head_only.momentum < 1.0)) {
        throw ConfigError("head_only_lr must be >= 0 and head_only_momentum in [0, 1)");
    }
    if (c.t_bins == 0 || !(c.t_upper > c.t_lower)) {
        throw ConfigError("t_bins must be positive and t_upper > t_lower");
    }
    if (!(c.t_tolerance > 0.0) || !(c.converged_tolerance > 0.0)) {
        throw ConfigError("t_tolerance and converged_tolerance must be positive");
    }
    if (c.entropy_grid < 2) {
        throw ConfigError("key 'entropy_grid': need at least 2 points");
    }
    static const std::vector<std::string> axes{"strategy", "alpha", "beta", "lambda", "loss"};
    for (const auto& a : c.ablation_axes) {
        if (std::find(axes.begin(), axes.end(), a) == axes.end()) {
            throw ConfigError("key 'ablation_axes': unknown axis '" + a +
                              "' (expected strategy, alpha, beta, lambda or loss)");
        }
    }
    if (c.ablation_jobs == 0) {
        throw ConfigError("key 'ablation_jobs': must be positive");
    }
}

// ---------------------------------------------------------------- outputs

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    f << text;
    if (!f) {
        throw IoError("failed writing " + path.string());
    }
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    }
}

double ood_fraction_of(const SplitDataset& data, const std::vector<std::uint64_t>& ids) {
    if (ids.empty()) {
        return 0.0;
    }
    std::size_t ood = 0;
    for (auto id : ids) {
        ood += data.sample(id).true_class == kOodClass ? 1 : 0;
    }
    return static_cast<double>(ood) / static_cast<double>(ids.size());
}

std::vector<double> entropy_grid_points(std::size_t classes, std::size_t points) {
    // Evenly spaced over (0, log N]; the last point sits just above log N
    // so uniform distributions are counted.
    std::vector<double> grid;
    const double top = std::log(static_cast<double>(classes)) * (1.0 + 1e-9);
    for (std::size_t i = 1; i <= points; ++i) {
        grid.push_back(top * static_cast<double>(i) / static_cast<double>(points));
    }
    return grid;
}

Json write_diagnostics(const fs::path& dir, const std::string& tag, const ExperimentConfig& c,
                       const SplitDataset& data, const ModelParams& params, const PseudoLabelStore& store,
                       const PseudoLabelStore& reference, const std::vector<std::uint64_t>& ids) {
    const auto samples = score_residuals(data, params, store, c.d2, &ids);
    HistogramSpec spec;
    spec.lower = c.t_lower;
    spec.upper = c.t_upper;
    spec.bins = c.t_bins;
    const TReport t = t_histogram(samples, spec, c.t_tolerance);
    write_histogram_csv(t, dir / ("t_hist_" + tag + ".csv"));

    Json j;
    j["scored"] = t.scored;
    j["fraction_t_within_tolerance"] = t.fraction_within;
    j["t_tolerance"] = c.t_tolerance;
    if (c.d2.beta > 0.0) {
        const FlatnessReport f = flatness_audit(samples, c.d2, c.converged_tolerance);
        write_flatness_csv(f, dir / ("flatness_" + tag + ".csv"));
        j["converged_tolerance"] = c.converged_tolerance;
        j["converged"] = f.converged;
        j["below_curve"] = f.below_curve;
        j["not_flattened"] = f.not_flattened;
        j["converged_below_curve"] = f.converged_below_curve;
        j["converged_not_flattened"] = f.converged_not_flattened;
        j["converged_link_within_1e-3"] = f.link_within;
    }

    const auto grid = entropy_grid_points(store.num_classes(), c.entropy_grid);
    const auto h_pseudo = pseudo_entropies(store, ids);
    const auto h_pred = prediction_entropies(data, params, ids);
    write_entropy_cdf_csv(grid, entropy_cdf(h_pseudo, grid), entropy_cdf(h_pred, grid),
                          dir / ("entropy_cdf_" + tag + ".csv"));
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) {
            s += x;
        }
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    j["mean_entropy_pseudo"] = mean(h_pseudo);
    j["mean_entropy_prediction"] = mean(h_pred);

    DriftAudit drift = sum_drift_audit(store, reference);
    attach_gradient_norms(drift, data, params, store, c.d2);
    write_drift_csv(drift, dir / ("sum_drift_" + tag + ".csv"));
    j["max_sum_drift"] = drift.max_drift;
    return j;
}

// ---------------------------------------------------------------- modes

struct R2D2Outcome {
    RunResult result;
    Json summary;
};

R2D2Outcome run_r2d2_into(const ExperimentConfig& c, const fs::path& dir, bool full_outputs) {
    make_dir(dir);
    write_text(dir / "config_resolved", format_config(c));
    const SplitDataset data = build_dataset(c);
    if (full_outputs) {
        save_dataset_csv(data, dir / "dataset.csv");
    }
    ModelParams params = build_model(c, data);
    Rng train = Rng(c.seed).fork(kTrainStream);

    Json summary;
    summary["mode"] = std::string(to_string(c.mode));
    summary["seed"] = c.seed;
    summary["dataset"] = data.provenance();
    summary["warnings"] = c.warnings;

    RunHooks hooks;
    double intra_stage1 = std::nan("");
    hooks.after_stage1 = [&](const ModelParams& p) {
        const auto features = export_features(data, p);
        intra_stage1 = mean_intra_class_distance(features);
        if (full_outputs) {
            save_checkpoint(p, dir / "checkpoint_stage1.d2ck");
            write_features_csv(features, dir / "features_stage1.csv");
        }
    };
    hooks.after_stage2 = [&](const ModelParams& p, const PseudoLabelStore& store, const PseudoLabelStore& reset) {
        if (full_outputs) {
            save_pseudo_snapshot(store, dir / "pseudo_stage2.d2pl");
            save_checkpoint(p, dir / "checkpoint_stage2.d2ck");
            summary["diagnostics_stage2"] =
                write_diagnostics(dir, "stage2", c, data, p, store, reset, store.unfrozen_ids());
        }
    };

    RunResult result = run_r2d2(data, std::move(params), c.plan, c.d2, train, hooks);
    write_metrics_csv(result.metrics, dir / "metrics.csv");

    const auto features = export_features(data, result.params);
    if (full_outputs) {
        save_checkpoint(result.params, dir / "checkpoint_final.d2ck");
        write_features_csv(features, dir / "features_final.csv");
    }
    summary["baseline_test_error"] = result.baseline_test_error;
    summary["final_test_error"] = result.final_test_error;
    summary["error_delta"] = result.final_test_error - result.baseline_test_error;
    summary["final_pseudo_accuracy"] = result.final_pseudo_accuracy;
    summary["final_pseudo_entropy"] = result.final_pseudo_entropy;
    summary["intra_class_distance_stage1"] = intra_stage1;
    summary["intra_class_distance_final"] = mean_intra_class_distance(features);

    const auto unlabeled = data.ids_with_role(Role::Unlabeled);
    Json ow;
    ow["enabled"] = c.plan.open_world;
    ow["pool_ood_fraction"] = ood_fraction_of(data, unlabeled);
    std::vector<std::uint64_t> discarded;
    for (const auto& ev : result.filter_events) {
        discarded.insert(discarded.end(), ev.discarded.begin(), ev.discarded.end());
    }
    ow["filter_events"] = result.filter_events.size();
    ow["discarded_total"] = discarded.size();
    ow["discarded_ood_fraction"] = ood_fraction_of(data, discarded);
    summary["open_world"] = ow;

    write_text(dir / "summary.json", summary.dump(2) + "\n");
    return {std::move(result), std::move(summary)};
}

void run_supervised(const ExperimentConfig& c, const fs::path& dir) {
    make_dir(dir);
    write_text(dir / "config_resolved", format_config(c));
    const SplitDataset data = build_dataset(c);
    ModelParams params = build_model(c, data);
    c.plan.validate();
    // Same stream as stage 1 of an r2d2 run, so the two baselines coincide.
    Rng stage1 = Rng(c.seed).fork(kTrainStream).fork(1);
    const auto metrics = stage1_supervised(data, params, c.plan, stage1);
    write_metrics_csv(metrics, dir / "metrics.csv");
    save_checkpoint(params, dir / "checkpoint_stage1.d2ck");
    Json summary;
    summary["mode"] = std::string(to_string(c.mode));
    summary["seed"] = c.seed;
    summary["dataset"] = data.provenance();
    summary["baseline_test_error"] = test_error(data, params);
    write_text(dir / "summary.json", summary.dump(2) + "\n");
}

void run_ablation(const ExperimentConfig& c, const fs::path& dir) {
    make_dir(dir);
    write_text(dir / "config_resolved", format_config(c));
    const auto cells = ablation_cells(c);
    std::vector<Json> summaries(cells.size());
    std::vector<std::exception_ptr> errors(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            try {
                summaries[i] = run_r2d2_into(cells[i].config, dir / cells[i].name, false).summary;
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t jobs = std::min(c.ablation_jobs, std::max<std::size_t>(cells.size(), 1));
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < jobs; ++t) {
        threads.emplace_back(worker);
    }
    worker();
    for (auto& t : threads) {
        t.join();
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }

    std::string csv = "cell,axis,value,baseline_error,final_error,error_delta,final_pseudo_accuracy,"
                      "final_pseudo_entropy\n";
    Json table = Json::array();
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const Json& s = summaries[i];
        auto field = [&](const char* key) {
            const auto& v = s.at(key);
            return v.is_null() ? std::string("nan") : fmt_real(v.get<double>());
        };
        csv += cells[i].name + "," + cells[i].axis + "," + cells[i].value + "," + field("baseline_test_error") +
               "," + field("final_test_error") + "," + field("error_delta") + "," + field("final_pseudo_accuracy") +
               "," + field("final_pseudo_entropy") + "\n";
        Json row;
        row["cell"] = cells[i].name;
        row["axis"] = cells[i].axis;
        row["value"] = cells[i].value;
        row["summary"] = s;
        table.push_back(row);
    }
    write_text(dir / "ablation.csv", csv);
    // Cells carry their own metrics; the top-level log concatenates them in cell order.
    std::string metrics;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        std::ifstream in(dir / cells[i].name / "metrics.csv", std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        std::string body = ss.str();
        const auto nl = body.find('\n');
        if (i == 0) {
            metrics += "cell," + body.substr(0, nl + 1);
        }
        std::istringstream lines(body.substr(nl + 1));
        for (std::string line; std::getline(lines, line);) {
            metrics += cells[i].name + "," + line + "\n";
        }
    }
    write_text(dir / "metrics.csv", metrics);
    write_text(dir / "summary.json", table.dump(2) + "\n");
}

void check_store_matches(const PseudoLabelStore& store, const SplitDataset& data) {
    if (store.num_classes() != data.num_classes()) {
        throw ConfigError("pseudo_snapshot has " + std::to_string(store.num_classes()) + " classes, dataset has " +
                          std::to_string(data.num_classes()));
    }
    for (const auto& e : store.entries()) {
        if (e.id >= data.size()) {
            throw ConfigError("pseudo_snapshot references sample " + std::to_string(e.id) +
                              " outside the configured dataset");
        }
        const Role expected = e.frozen ? Role::Labeled : Role::Unlabeled;
        if (data.sample(e.id).role != expected) {
            throw ConfigError("pseudo_snapshot sample " + std::to_string(e.id) +
                              " does not match the configured split");
        }
    }
}

void run_diagnose(const ExperimentConfig& c, const fs::path& dir) {
    make_dir(dir);
    write_text(dir / "config_resolved", format_config(c));
    const SplitDataset data = build_dataset(c);
    ModelParams params;
    if (!c.checkpoint.empty()) {
        params = load_checkpoint(c.checkpoint);
        if (params.input_dim() != data.dim() || params.num_classes() != data.num_classes()) {
            throw ConfigError("checkpoint shape does not match the configured dataset");
        }
    } else {
        params = build_model(c, data);
        Rng stage1 = Rng(c.seed).fork(kTrainStream).fork(1);
        stage1_supervised(data, params, c.plan, stage1);
    }
    PseudoLabelStore store = c.pseudo_snapshot.empty() ? init_pseudo_labels(data, params, c.d2)
                                                       : load_pseudo_snapshot(c.pseudo_snapshot, c.d2.K);
    check_store_matches(store, data);
    const PseudoLabelStore reference = store;
    optimize_head_and_pseudo(data, params, store, c.d2, c.head_only);

    const auto ids = store.unfrozen_ids();
    Json summary;
    summary["mode"] = std::string(to_string(c.mode));
    summary["seed"] = c.seed;
    summary["head_only_steps"] = c.head_only.steps;
    summary["warnings"] = c.warnings;
    summary["diagnostics"] = write_diagnostics(dir, "diagnose", c, data, params, store, reference, ids);
    write_features_csv(export_features(data, params), dir / "features_diagnose.csv");
    save_checkpoint(params, dir / "checkpoint_diagnose.d2ck");
    save_pseudo_snapshot(store, dir / "pseudo_diagnose.d2pl");

    // One metrics row summarising the diagnosed state.
    MetricsRecord r;
    r.stage = "diagnose";
    r.epoch = c.head_only.steps;
    r.lr = c.head_only.lr;
    const auto samples = score_residuals(data, params, store, c.d2, &ids);
    std::vector<double> t_abs;
    double lt = 0.0, lc = 0.0, le = 0.0;
    for (const auto& s : samples) {
        lt += s.loss.total;
        lc += s.loss.l_c;
        le += s.loss.l_e;
        t_abs.push_back(std::abs(s.t));
    }
    const double n = samples.empty() ? std::nan("") : static_cast<double>(samples.size());
    r.loss_total = lt / n;
    r.loss_c = lc / n;
    r.loss_e = le / n;
    r.acc_labeled = accuracy(data, params, data.ids_with_role(Role::Labeled));
    r.acc_test = accuracy(data, params, data.ids_with_role(Role::Test));
    std::size_t correct = 0, scored = 0;
    for (auto id : ids) {
        const int truth = data.sample(id).true_class;
        if (truth != kOodClass) {
            ++scored;
            correct += static_cast<int>(argmax(store.at(id).logits.values)) == truth ? 1 : 0;
        }
    }
    r.acc_pseudo = scored ? static_cast<double>(correct) / static_cast<double>(scored) : std::nan("");
    const auto hp = pseudo_entropies(store, ids);
    const auto hq = prediction_entropies(data, params, ids);
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < hp.size(); ++i) {
        sp += hp[i];
        sq += hq[i];
    }
    r.mean_H_pseudo = sp / n;
    r.mean_H_pred = sq / n;
    r.t_abs_p50 = quantile(t_abs, 0.5);
    r.t_abs_p95 = quantile(t_abs, 0.95);
    r.sum_drift_max = sum_drift_audit(store, reference).max_drift;
    write_metrics_csv({r}, dir / "metrics.csv");
    write_text(dir / "summary.json", summary.dump(2) + "\n");
}

} // namespace

Mode parse_mode(std::string_view name) {
    if (name == "r2d2") {
        return Mode::R2D2;
    }
    if (name == "supervised_baseline") {
        return Mode::SupervisedBaseline;
    }
    if (name == "ablation") {
        return Mode::Ablation;
    }
    if (name == "diagnose") {
        return Mode::Diagnose;
    }
    throw ConfigError("unknown mode '" + std::string(name) +
                      "' (expected r2d2, supervised_baseline, ablation or diagnose)");
}

std::string_view to_string(Mode mode) {
    switch (mode) {
    case Mode::R2D2:
        return "r2d2";
    case Mode::SupervisedBaseline:
        return "supervised_baseline";
    case Mode::Ablation:
        return "ablation";
    case Mode::Diagnose:
        return "diagnose";
    }
    return "?";
}

std::vector<std::size_t> ExperimentConfig::resolved_hidden() const {
    if (!hidden_sizes.empty()) {
        return hidden_sizes;
    }
    return dataset == "idx" ? std::vector<std::size_t>{256, 64} : std::vector<std::size_t>{64, 2};
}

ExperimentConfig parse_config(const std::string& text, const std::vector<std::pair<std::string, std::string>>& overrides) {
    struct Assignment {
        std::string value;
        std::string where;
    };
    std::map<std::string, Assignment> assigned;

    std::istringstream in(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        std::string_view sv = line;
        if (const auto hash = sv.find('#'); hash != std::string_view::npos) {
            sv = sv.substr(0, hash);
        }
        sv = trim(sv);
        if (sv.empty()) {
            continue;
        }
        const auto eq = sv.find('=');
        const std::string where = "line " + std::to_string(line_no);
        if (eq == std::string_view::npos) {
            throw ConfigError(where + ": expected 'key = value', got '" + std::string(sv) + "'");
        }
        const std::string key(trim(sv.substr(0, eq)));
        if (find_key(key) == nullptr) {
            throw ConfigError(where + ": unknown key '" + key + "'");
        }
        assigned[key] = {std::string(trim(sv.substr(eq + 1))), where};
    }
    for (const auto& [key, value] : overrides) {
        if (find_key(key) == nullptr) {
            throw ConfigError("flag --" + key + ": unknown key '" + key + "'");
        }
        assigned[key] = {value, "flag --" + key};
    }

    ExperimentConfig c;
    Stage2Lists lists;
    for (const auto& spec : registry()) {
        const auto it = assigned.find(spec.name);
        if (it == assigned.end()) {
            continue;
        }
        try {
            spec.set(c, lists, it->second.value);
        } catch (const BadValue& e) {
            throw ConfigError(it->second.where + ": key '" + spec.name + "': " + e.what);
        }
    }
    combine_stage2(c, lists);
    validate(c);
    return c;
}

std::string format_config(const ExperimentConfig& config) {
    std::string out;
    for (const auto& spec : registry()) {
        out += spec.name;
        out += " = ";
        out += spec.get(config);
        out += '\n';
    }
    return out;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> names;
    for (const auto& spec : registry()) {
        names.emplace_back(spec.name);
    }
    return names;
}

SplitDataset build_dataset(const ExperimentConfig& c) {
    Rng rng = Rng(c.seed).fork(kDataStream);
    SplitDataset data;
    if (c.dataset == "gaussians") {
        GaussianSpec spec;
        spec.num_classes = c.classes;
        spec.dim = c.gauss_dim;
        spec.centers = default_centers(c.classes, c.gauss_dim, c.gauss_radius);
        spec.spread = c.gauss_spread;
        spec.per_class.assign(c.classes, c.labeled_per_class + c.unlabeled_per_class);
        const SplitDataset pool = gen_gaussians(spec, rng);
        spec.per_class.assign(c.classes, c.test_per_class);
        const SplitDataset test = gen_gaussians(spec, rng);
        data = split(pool, c.labeled_per_class, test, rng);
    } else if (c.dataset == "moons") {
        const SplitDataset pool = gen_two_moons(c.labeled_per_class + c.unlabeled_per_class, c.moons_noise, rng);
        const SplitDataset test = gen_two_moons(c.test_per_class, c.moons_noise, rng);
        data = split(pool, c.labeled_per_class, test, rng);
    } else {
        const SplitDataset pool = load_idx(c.idx_images, c.idx_labels);
        if (!c.idx_test_images.empty()) {
            data = split(pool, c.labeled_per_class, load_idx(c.idx_test_images, c.idx_test_labels), rng);
        } else {
            data = split(pool, c.labeled_per_class, c.test_fraction, rng);
        }
    }
    if (!c.unbalance_counts.empty()) {
        if (c.unbalance_counts.size() != data.num_classes()) {
            throw ConfigError("key 'unbalance_counts': expected " + std::to_string(data.num_classes()) +
                              " counts, got " + std::to_string(c.unbalance_counts.size()));
        }
        data = unbalance(data, c.unbalance_counts, rng);
    }
    if (c.ood_fraction > 0.0) {
        // Out-of-distribution blob centred on the mean of the training pool.
        const auto ids = data.ids_with_role(Role::Unlabeled);
        Vector center(data.dim(), 0.0);
        std::size_t n = 0;
        for (const auto& s : data.samples()) {
            if (s.role != Role::Test) {
                for (std::size_t d = 0; d < center.size(); ++d) {
                    center[d] += s.features[d];
                }
                ++n;
            }
        }
        for (auto& v : center) {
            v /= static_cast<double>(std::max<std::size_t>(n, 1));
        }
        // ood_fraction is the OOD share of the final unlabeled pool.
        const auto count = static_cast<std::size_t>(
            std::llround(c.ood_fraction / (1.0 - c.ood_fraction) * static_cast<double>(ids.size())));
        GaussianSpec ood;
        ood.num_classes = 1;
        ood.dim = data.dim();
        ood.centers = {center};
        ood.per_class = {std::max<std::size_t>(count, 1)};
        ood.spread = c.ood_spread;
        data = inject_ood(data, gen_gaussians(ood, rng), count, rng);
    }
    return data;
}

ModelParams build_model(const ExperimentConfig& c, const SplitDataset& data) {
    std::vector<std::size_t> sizes{data.dim()};
    for (auto h : c.resolved_hidden()) {
        sizes.push_back(h);
    }
    sizes.push_back(data.num_classes());
    Rng rng = Rng(c.seed).fork(kModelStream);
    return init_params(sizes, c.activation, rng);
}

std::vector<AblationCell> ablation_cells(const ExperimentConfig& base) {
    std::vector<AblationCell> cells;
    auto selected = [&](const char* axis) {
        return std::find(base.ablation_axes.begin(), base.ablation_axes.end(), axis) != base.ablation_axes.end();
    };
    auto add = [&](std::string axis, std::string value, ExperimentConfig cfg) {
        cfg.mode = Mode::R2D2;
        const std::string name = axis + "_" + value;
        cfg.out = (fs::path(base.out) / name).string();
        cfg.warnings = cfg.d2.validate();
        cells.push_back({name, std::move(axis), std::move(value), std::move(cfg)});
    };

    if (selected("strategy") && !base.plan.stage2.empty()) {
        const auto& segs = base.plan.stage2;
        const double first_lr = segs.front().lr;
        auto variant = [&](bool keep_lrs, bool keep_repredict) {
            ExperimentConfig cfg = base;
            for (auto& s : cfg.plan.stage2) {
                s.lr = keep_lrs ? s.lr : first_lr;
                s.repredict = keep_repredict ? s.repredict : false;
            }
            return cfg;
        };
        ExperimentConfig a = base;
        a.plan.stage2 = {segs.front()};
        a.plan.stage2.front().repredict = false;
        add("strategy", "a", a);                   // a single stage-2 pass
        add("strategy", "b", variant(false, false));  // repeated, nothing else
        add("strategy", "c", variant(false, true));   // repeated with reprediction
        add("strategy", "d", variant(true, false));   // repeated with lower learning rates
        add("strategy", "e", variant(true, true));    // both
    }
    if (selected("alpha")) {
        for (double v : {0.1, 0.2, 0.3, 0.4, 0.5}) {
            ExperimentConfig cfg = base;
            cfg.d2.alpha = v;
            add("alpha", fmt_real(v), cfg);
        }
    }
    if (selected("beta")) {
        for (double v : {0.01, 0.02, 0.03, 0.04, 0.05}) {
            ExperimentConfig cfg = base;
            cfg.d2.beta = v;
            add("beta", fmt_real(v), cfg);
        }
    }
    if (selected("lambda")) {
        for (double v : {1000.0, 2000.0, 3000.0, 4000.0, 5000.0}) {
            ExperimentConfig cfg = base;
            cfg.d2.lambda = v;
            add("lambda", fmt_real(v), cfg);
        }
    }
    if (selected("loss")) {
        for (auto loss : {ClassificationLoss::ForwardKl, ClassificationLoss::ReverseKl, ClassificationLoss::SquaredL2}) {
            ExperimentConfig cfg = base;
            cfg.d2.classification_loss = loss;
            add("loss", std::string(to_string(loss)), cfg);
        }
    }
    return cells;
}

void run_or_throw(const ExperimentConfig& config) {
    if (config.out.empty()) {
        throw ConfigError("no output directory (set --out or D2SSL_OUT_ROOT)");
    }
    const fs::path dir = config.out;
    switch (config.mode) {
    case Mode::R2D2:
        run_r2d2_into(config, dir, true);
        break;
    case Mode::SupervisedBaseline:
        run_supervised(config, dir);
        break;
    case Mode::Ablation:
        run_ablation(config, dir);
        break;
    case Mode::Diagnose:
        run_diagnose(config, dir);
        break;
    }
}

int run(const ExperimentConfig& config) {
    try {
        run_or_throw(config);
        return kExitOk;
    } catch (const ConfigError& e) {
        std::cerr << "d2ssl: configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const ScheduleError& e) {
        std::cerr << "d2ssl: configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const DimensionError& e) {
        std::cerr << "d2ssl: configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const FormatError& e) {
        std::cerr << "d2ssl: input error: " << e.what() << '\n';
        return kExitIo;
    } catch (const IoError& e) {
        std::cerr << "d2ssl: I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "d2ssl: I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "d2ssl: numeric abort: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "d2ssl: error: " << e.what() << '\n';
        return kExitFailure;
    }
}

} // namespace d2ssl
