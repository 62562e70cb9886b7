#include <doctest.h>

#include <cmath>
#include <numeric>

#include "d2ssl/errors.hpp"
#include "d2ssl/trainer.hpp"
#include "test_support.hpp"

using namespace d2ssl;
using namespace d2ssl::testing;

namespace {

ModelParams one_scalar(double value) {
    ModelParams p;
    p.head = Matrix(1, 1, value);
    return p;
}

ModelParams net_for(const SplitDataset& d, std::uint64_t seed, std::vector<std::size_t> hidden = {16, 2}) {
    std::vector<std::size_t> sizes{d.dim()};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(d.num_classes());
    Rng rng(seed);
    return init_params(sizes, Activation::Tanh, rng);
}

SchedulePlan small_plan() {
    SchedulePlan plan;
    plan.stage1 = {60, 0.05, 70.0, 4};
    plan.stage2 = {{8, 0.05, false}, {8, 0.04, true}, {8, 0.03, true}};
    plan.labeled_batch = 4;
    plan.unlabeled_batch = 12;
    plan.stage3 = {10, 0.01, 10.0, 32};
    return plan;
}

} // namespace

TEST_CASE("nesterov step") {
    SUBCASE("zero gradient and buffer leave parameters") {
        auto p = one_scalar(1.5);
        auto st = OptimizerState::for_params(p, 0.9, 0.0);
        sgd_nesterov_step(p, GradientSet::zeros_like(p), st, 0.1);
        CHECK(p.head(0, 0) == 1.5);
    }
    SUBCASE("no momentum is plain SGD") {
        auto p = one_scalar(1.0);
        auto st = OptimizerState::for_params(p, 0.0, 0.0);
        auto g = GradientSet::zeros_like(p);
        g.head(0, 0) = 0.5;
        sgd_nesterov_step(p, g, st, 0.2);
        CHECK(p.head(0, 0) == doctest::Approx(0.9).epsilon(1e-15));
    }
    SUBCASE("two steps with constant gradient") {
        auto p = one_scalar(0.0);
        auto st = OptimizerState::for_params(p, 0.9, 0.0);
        auto g = GradientSet::zeros_like(p);
        g.head(0, 0) = 1.0;
        sgd_nesterov_step(p, g, st, 1.0);
        CHECK(p.head(0, 0) == doctest::Approx(-1.9).epsilon(1e-15));
        sgd_nesterov_step(p, g, st, 1.0);
        // (1 + 0.9) + (1 + 0.9 + 0.81)
        CHECK(p.head(0, 0) == doctest::Approx(-4.61).epsilon(1e-15));
    }
    SUBCASE("weight decay joins the gradient") {
        auto p = one_scalar(2.0);
        auto st = OptimizerState::for_params(p, 0.0, 0.1);
        sgd_nesterov_step(p, GradientSet::zeros_like(p), st, 1.0);
        CHECK(p.head(0, 0) == doctest::Approx(1.8).epsilon(1e-15));
    }
}

TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(0.0, 100.0, 0.05) == 0.05);
    CHECK(cosine_lr(100.0, 100.0, 0.05) == doctest::Approx(0.0).epsilon(1e-18));
    CHECK(cosine_lr(50.0, 100.0, 0.05) == doctest::Approx(0.025).epsilon(1e-15));
    CHECK(cosine_lr(25.0, 100.0, 1.0) == doctest::Approx(0.5 * (1.0 + std::sqrt(0.5))).epsilon(1e-15));
    CHECK_THROWS_AS(cosine_lr(-1.0, 100.0, 0.05), ScheduleError);
    CHECK_THROWS_AS(cosine_lr(101.0, 100.0, 0.05), ScheduleError);
    CHECK_THROWS_AS(cosine_lr(0.0, 0.0, 0.05), ScheduleError);
}

TEST_CASE("plan validation") {
    SchedulePlan plan;
    CHECK_NOTHROW(plan.validate());
    plan.stage2.front().repredict = true;
    CHECK_THROWS_AS(plan.validate(), ConfigError);
    plan = SchedulePlan{};
    plan.stage1.horizon = 10.0;
    CHECK_THROWS_AS(plan.validate(), ConfigError);
    plan = SchedulePlan{};
    plan.unlabeled_batch = 0;
    CHECK_THROWS_AS(plan.validate(), ConfigError);
    plan = SchedulePlan{};
    plan.discard_fraction = 1.0;
    CHECK_THROWS_AS(plan.validate(), ConfigError);
    plan = SchedulePlan{};
    plan.momentum = 1.0;
    CHECK_THROWS_AS(plan.validate(), ConfigError);
}

TEST_CASE("metrics csv layout") {
    MetricsRecord r;
    r.stage = "stage2";
    r.epoch = 3;
    r.lr = 0.05;
    r.loss_total = 1.0 / 3.0;
    r.acc_pseudo = std::nan("");
    const auto csv = encode_metrics_csv({r});
    CHECK(csv.rfind("stage,epoch,lr,loss_total,loss_c,loss_e,acc_labeled,acc_test,acc_pseudo,mean_H_pseudo,"
                    "mean_H_pred,t_abs_p50,t_abs_p95,sum_drift_max\n",
                    0) == 0);
    CHECK(csv.find("stage2,3,0.05,0.333333333,0,0,0,0,nan,") != std::string::npos);
}

TEST_CASE("stage 1 fits separable labeled data") {
    Rng rng(4);
    GaussianSpec spec;
    spec.num_classes = 2;
    spec.centers = {{-3.0, 0.0}, {3.0, 0.0}};
    spec.spread = 0.5;
    spec.per_class = {60, 60};
    const auto pool = gen_gaussians(spec, rng);
    const auto data = split(pool, 10, 0.3, rng);
    auto params = net_for(data, 1);
    SchedulePlan plan;
    plan.stage1 = {100, 0.05, 120.0, 4};
    Rng train(2);
    const auto metrics = stage1_supervised(data, params, plan, train);
    REQUIRE(metrics.size() == 100);
    CHECK(metrics.back().acc_labeled == 1.0);
    CHECK(metrics.back().stage == "stage1");
    CHECK(metrics.back().epoch == 100);
    CHECK(std::isnan(metrics.back().acc_pseudo));
}

TEST_CASE("zero-epoch stages leave parameters unchanged") {
    const auto data = small_blobs(1, 3, 20, 5);
    const auto params = net_for(data, 3);
    SchedulePlan plan;
    plan.stage1.epochs = 0;
    plan.stage3.epochs = 0;
    plan.stage2.clear();
    auto p = params;
    Rng rng(1);
    CHECK(stage1_supervised(data, p, plan, rng).empty());
    CHECK(p == params);
    const auto store = init_pseudo_labels(data, p, D2Config{});
    CHECK(stage3_finetune(data, p, store, store.unfrozen_ids(), plan, rng).empty());
    CHECK(p == params);

    const auto result = run_r2d2(data, params, plan, D2Config{}, rng);
    CHECK(result.params == params);
    CHECK(result.metrics.empty());
    CHECK(encode_metrics_csv(result.metrics).find('\n') == encode_metrics_csv(result.metrics).size() - 1);
}

TEST_CASE("stage 1 is deterministic for a fixed seed") {
    const auto data = small_blobs(2, 3, 10, 5);
    SchedulePlan plan;
    plan.stage1 = {20, 0.05, 25.0, 4};
    auto a = net_for(data, 5);
    auto b = a;
    Rng ra(9), rb(9);
    stage1_supervised(data, a, plan, ra);
    stage1_supervised(data, b, plan, rb);
    CHECK(a == b);
}

TEST_CASE("stage 2 with lambda zero keeps pseudo-labels fixed") {
    const auto data = small_blobs(3, 4, 24, 5, 1.0);
    auto params = net_for(data, 4);
    D2Config cfg;
    cfg.lambda = 0.0;
    auto store = init_pseudo_labels(data, params, cfg);
    const auto before = store;
    SchedulePlan plan = small_plan();
    plan.stage2 = {{5, 0.05, false}};
    Rng rng(1);
    const auto res = stage2_d2(data, params, store, plan, cfg, rng);
    CHECK(res.metrics.size() == 5);
    CHECK(store == before);
    CHECK_FALSE(params == net_for(data, 4));
}

TEST_CASE("a repredicting segment with no epochs leaves the reprediction") {
    const auto data = small_blobs(3, 4, 24, 5, 1.0);
    auto params = net_for(data, 4);
    const D2Config cfg;
    auto store = init_pseudo_labels(data, params, cfg);
    SchedulePlan plan = small_plan();
    plan.stage2 = {{3, 0.05, false}, {0, 0.04, true}};
    Rng rng(1);
    const auto res = stage2_d2(data, params, store, plan, cfg, rng);
    CHECK(res.metrics.size() == 3);
    auto expected = store;
    repredict(expected, params, data);
    CHECK(store == expected);
    CHECK(res.last_reset == expected);
}

TEST_CASE("stage 2 records and conserves pseudo-logit sums") {
    const auto data = small_blobs(5, 4, 48, 10, 1.0);
    auto params = net_for(data, 6);
    const D2Config cfg;
    SchedulePlan plan = small_plan();
    Rng s1(2);
    stage1_supervised(data, params, plan, s1);
    auto store = init_pseudo_labels(data, params, cfg);
    Rng rng(3);
    const auto res = stage2_d2(data, params, store, plan, cfg, rng);
    REQUIRE(res.metrics.size() == 24);
    for (std::size_t i = 0; i < res.metrics.size(); ++i) {
        const auto& m = res.metrics[i];
        CHECK(m.stage == "stage2");
        CHECK(m.epoch == i + 1);
        CHECK(m.sum_drift_max < 1e-9);
        CHECK(std::isfinite(m.loss_total));
        CHECK(m.loss_total == doctest::Approx(cfg.alpha * m.loss_c + cfg.beta * m.loss_e).epsilon(1e-9));
    }
    CHECK(res.metrics[8].lr == 0.04);
    CHECK(res.final_active.ids.size() == 192);
}

TEST_CASE("stage 2 rejects batches larger than the pools") {
    const auto data = small_blobs(3, 2, 5, 5);
    auto params = net_for(data, 4);
    const D2Config cfg;
    auto store = init_pseudo_labels(data, params, cfg);
    SchedulePlan plan = small_plan();
    plan.labeled_batch = 9;
    Rng rng(1);
    CHECK_THROWS_AS(stage2_d2(data, params, store, plan, cfg, rng), ConfigError);
    plan = small_plan();
    plan.unlabeled_batch = 21;
    CHECK_THROWS_AS(stage2_d2(data, params, store, plan, cfg, rng), ConfigError);
}

TEST_CASE("stage 3 with correct pseudo-labels equals supervised training on all data") {
    // Labeled ids come first so that both pools list samples in the same order.
    Rng g(5);
    GaussianSpec spec;
    spec.centers = default_centers(4, 2, 3.0);
    spec.per_class.assign(4, 15);
    const auto raw = gen_gaussians(spec, g);
    std::vector<Sample> semi, full;
    std::size_t next = 0;
    for (int pass = 0; pass < 2; ++pass) {
        for (const auto& s : raw.samples()) {
            const bool labeled = s.id % 5 == 0;
            if (labeled == (pass == 0)) {
                Sample a = s;
                a.id = next++;
                a.role = labeled ? Role::Labeled : Role::Unlabeled;
                semi.push_back(a);
                a.role = Role::Labeled;
                full.push_back(a);
            }
        }
    }
    const SplitDataset semi_data(4, semi), full_data(4, full);
    PseudoLabelStore store(4, 10.0);
    for (const auto& s : semi_data.samples()) {
        if (s.role == Role::Labeled) {
            store.add_labeled(s.id, s.true_class);
        } else {
            Vector y(4, -1.0);
            y[static_cast<std::size_t>(s.true_class)] = 3.0;
            store.add_unlabeled(s.id, LogitVector(y));
        }
    }
    SchedulePlan plan;
    plan.stage3 = {12, 0.02, 12.0, 8};
    plan.stage1 = plan.stage3;
    const auto init = net_for(semi_data, 8);
    auto a = init, b = init;
    Rng ra(4), rb(4);
    stage3_finetune(semi_data, a, store, store.unfrozen_ids(), plan, ra);
    stage1_supervised(full_data, b, plan, rb);
    CHECK(a == b);
}

TEST_CASE("open-world filter") {
    SUBCASE("drops the requested share") {
        Rng rng(1);
        PseudoLabelStore store(3, 10.0);
        for (std::uint64_t id = 0; id < 100; ++id) {
            store.add_unlabeled(id, random_logits(rng, 3, 2.0));
        }
        store.add_labeled(100, 0);
        const auto a = open_world_filter(store, 0.1);
        CHECK(a.ids.size() == 90);
        CHECK(a.discarded.size() == 10);
        CHECK(std::is_sorted(a.ids.begin(), a.ids.end()));
        const auto b = open_world_filter(store, 0.0);
        CHECK(b.ids.size() == 100);
        CHECK(b.discarded.empty());
        PseudoLabelStore big(3, 10.0);
        for (std::uint64_t id = 0; id < 2500; ++id) {
            big.add_unlabeled(id, random_logits(rng, 3, 2.0));
        }
        CHECK(open_world_filter(big, 0.1).discarded.size() == 250);
    }
    SUBCASE("the uniform outlier goes first") {
        PseudoLabelStore store(4, 10.0);
        for (std::uint64_t id = 0; id < 10; ++id) {
            store.add_unlabeled(id, id == 6 ? LogitVector{0.0, 0.0, 0.0, 0.0}
                                            : LogitVector{5.0 + 0.1 * static_cast<double>(id), 0.0, 0.0, 0.0});
        }
        const auto a = open_world_filter(store, 0.1);
        CHECK(a.discarded == std::vector<std::uint64_t>{6});
    }
    SUBCASE("ties keep the lower id") {
        PseudoLabelStore store(2, 10.0);
        for (std::uint64_t id = 0; id < 4; ++id) {
            store.add_unlabeled(id, LogitVector{1.0, 0.0});
        }
        CHECK(open_world_filter(store, 0.5).discarded == std::vector<std::uint64_t>{2, 3});
    }
}

TEST_CASE("run_r2d2 is reproducible and reports its errors") {
    const auto data = small_blobs(7, 3, 40, 20, 1.2);
    const auto params = net_for(data, 7);
    const auto plan = small_plan();
    Rng r1(11), r2(11);
    const auto a = run_r2d2(data, params, plan, D2Config{}, r1);
    const auto b = run_r2d2(data, params, plan, D2Config{}, r2);
    CHECK(encode_metrics_csv(a.metrics) == encode_metrics_csv(b.metrics));
    CHECK(a.params == b.params);
    CHECK(a.metrics.size() == 60 + 24 + 10);
    CHECK(a.final_test_error == doctest::Approx(test_error(data, a.params)));
    CHECK(a.stage3_unlabeled.size() == 160);
}

TEST_CASE("hooks observe stage boundaries") {
    const auto data = small_blobs(7, 3, 40, 20, 1.2);
    const auto params = net_for(data, 7);
    int calls = 0;
    RunHooks hooks;
    hooks.after_stage1 = [&](const ModelParams&) { ++calls; };
    hooks.after_stage2 = [&](const ModelParams&, const PseudoLabelStore& s, const PseudoLabelStore& reset) {
        ++calls;
        CHECK(s.size() == reset.size());
    };
    Rng rng(1);
    run_r2d2(data, params, small_plan(), D2Config{}, rng, hooks);
    CHECK(calls == 2);
}

TEST_CASE("loss drops right after each reprediction") {
    // Mean loss over a short window after each reprediction against the
    // window that closes the previous segment.
    const auto data = small_blobs(21, 5, 150, 50, 1.0);
    auto params = net_for(data, 22, {64, 2});
    SchedulePlan plan;
    plan.stage1 = {100, 0.05, 117.0, 4};
    plan.stage2 = {{20, 0.05, false}, {20, 0.04, true}, {20, 0.03, true}, {20, 0.02, true}};
    Rng s1(1);
    stage1_supervised(data, params, plan, s1);
    auto store = init_pseudo_labels(data, params, D2Config{});
    Rng s2(2);
    const auto res = stage2_d2(data, params, store, plan, D2Config{}, s2);
    REQUIRE(res.metrics.size() == 80);
    const std::size_t w = 3;
    for (std::size_t boundary : {20u, 40u, 60u}) {
        double before = 0.0, after = 0.0;
        for (std::size_t i = 0; i < w; ++i) {
            before += res.metrics[boundary - 1 - i].loss_total;
            after += res.metrics[boundary + i].loss_total;
        }
        CAPTURE(boundary);
        CHECK(after < before);
    }
}
