#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "d2ssl/errors.hpp"
#include "d2ssl/experiment.hpp"

using namespace d2ssl;
namespace fs = std::filesystem;

namespace {

const char* const kTiny = R"(# small enough for unit tests
labeled_per_class = 2
unlabeled_per_class = 20
test_per_class = 10
hidden_sizes = 8,2
stage1_epochs = 3
stage1_horizon = 3
stage2_epochs = 2,2
stage2_lrs = 0.05,0.04
stage2_repredict = 0,1
labeled_batch = 4
unlabeled_batch = 8
stage3_epochs = 2
stage3_horizon = 2
stage3_batch = 16
head_only_steps = 20
)";

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "d2ssl_experiment_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir.parent_path());
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

fs::path tiny_config_file() {
    const auto path = fs::temp_directory_path() / "d2ssl_experiment_tests" / "tiny.cfg";
    fs::create_directories(path.parent_path());
    std::ofstream(path) << kTiny;
    return path;
}

int cli(const std::string& args) {
    const std::string cmd = std::string(D2SSL_BINARY) + " " + args + " 2>/dev/null >/dev/null";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

ExperimentConfig tiny(Mode mode, const std::string& out) {
    auto c = parse_config(kTiny, {{"mode", std::string(to_string(mode))}, {"out", out}});
    return c;
}

} // namespace

TEST_CASE("empty config keeps the reference defaults") {
    const auto c = parse_config("");
    CHECK(c.mode == Mode::R2D2);
    CHECK(c.seed == 1);
    CHECK(c.d2.alpha == 0.1);
    CHECK(c.d2.beta == 0.03);
    CHECK(c.d2.lambda == 4000.0);
    CHECK(c.d2.K == 10.0);
    CHECK(c.plan.stage1.epochs == 200);
    CHECK(c.plan.stage1.horizon == 233.0);
    REQUIRE(c.plan.stage2.size() == 4);
    CHECK(c.plan.stage2[3].lr == 0.02);
    CHECK_FALSE(c.plan.stage2[0].repredict);
    CHECK(c.plan.stage2[1].repredict);
    CHECK(c.plan.stage3.batch == 64);
    CHECK(c.plan.momentum == 0.9);
    CHECK(c.plan.weight_decay == 2e-4);
    CHECK(c.resolved_hidden() == std::vector<std::size_t>{64, 2});
    CHECK(c.warnings.empty());
}

TEST_CASE("overrides win over the file") {
    const auto c = parse_config("alpha = 0.1\n", {{"alpha", "0.2"}});
    CHECK(c.d2.alpha == 0.2);
    const auto later = parse_config("alpha = 0.3\nalpha = 0.4 # comment\n");
    CHECK(later.d2.alpha == 0.4);
}

TEST_CASE("config errors name the key and the line") {
    try {
        parse_config("alpha = banana\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string what = e.what();
        CHECK(what.find("alpha") != std::string::npos);
        CHECK(what.find("line 1") != std::string::npos);
    }
    try {
        parse_config("\n\nnot_a_key = 3\n");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("line 3: unknown key 'not_a_key'") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config("alpha 0.1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("", {{"bogus", "1"}}), ConfigError);
    CHECK_THROWS_AS(parse_config("stage2_epochs = 10,10\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("stage2_repredict = 1,1,1,1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("dataset = cifar\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("dataset = idx\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("ood_fraction = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("ablation_axes = alpha,colour\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("mode = train\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("labeled_entropy = maybe\n"), ConfigError);
}

TEST_CASE("a weak classification weight is accepted with a warning") {
    const auto c = parse_config("alpha = 0.01\n");
    CHECK_FALSE(c.warnings.empty());
}

TEST_CASE("stage 2 lists resize together") {
    const auto c = parse_config("stage2_epochs = 5,6\nstage2_lrs = 0.1,0.2\nstage2_repredict = 0,1\n");
    REQUIRE(c.plan.stage2.size() == 2);
    CHECK(c.plan.stage2[1].epochs == 6);
    CHECK(c.plan.stage2[1].lr == 0.2);
    CHECK(c.plan.stage2[1].repredict);
    const auto same = parse_config("stage2_epochs = 1,2,3,4\n");
    CHECK(same.plan.stage2[2].lr == 0.03);
}

TEST_CASE("resolved config parses back to the same config") {
    const auto c = parse_config(kTiny, {{"alpha", "0.123456789012345"}, {"classification_loss", "reverse_kl"}});
    const auto text = format_config(c);
    const auto again = parse_config(text);
    CHECK(format_config(again) == text);
    CHECK(again.d2.alpha == 0.123456789012345);
    CHECK(again.d2.classification_loss == ClassificationLoss::ReverseKl);
    CHECK(config_keys().size() == 58);
}

TEST_CASE("ablation grid") {
    auto base = parse_config("", {{"out", "/tmp/x"}});
    const auto cells = ablation_cells(base);
    CHECK(cells.size() == 5 + 5 + 5 + 5 + 3);
    std::vector<double> alphas;
    for (const auto& cell : cells) {
        CHECK(cell.config.mode == Mode::R2D2);
        CHECK(cell.config.out == "/tmp/x/" + cell.name);
        if (cell.axis == "alpha") {
            alphas.push_back(cell.config.d2.alpha);
        }
    }
    CHECK(alphas == std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5});
    CHECK(cells[0].name == "strategy_a");
    CHECK(cells[0].config.plan.stage2.size() == 1);
    CHECK(cells[1].config.plan.stage2[3].lr == 0.05);
    CHECK_FALSE(cells[1].config.plan.stage2[3].repredict);
    CHECK(cells[4].config.plan.stage2 == base.plan.stage2);

    base.ablation_axes = {"loss"};
    CHECK(ablation_cells(base).size() == 3);
}

TEST_CASE("every mode is deterministic for a fixed seed") {
    for (auto mode : {Mode::R2D2, Mode::SupervisedBaseline, Mode::Ablation, Mode::Diagnose}) {
        CAPTURE(to_string(mode));
        const auto a = scratch(std::string(to_string(mode)) + "_a");
        const auto b = scratch(std::string(to_string(mode)) + "_b");
        run_or_throw(tiny(mode, a.string()));
        run_or_throw(tiny(mode, b.string()));
        const auto ma = slurp(a / "metrics.csv");
        CHECK_FALSE(ma.empty());
        CHECK(ma == slurp(b / "metrics.csv"));
        CHECK(slurp(a / "summary.json") == slurp(b / "summary.json"));
    }
}

TEST_CASE("supervised baseline matches the first stage of a full run") {
    const auto sup = scratch("sup");
    const auto full = scratch("full");
    run_or_throw(tiny(Mode::SupervisedBaseline, sup.string()));
    run_or_throw(tiny(Mode::R2D2, full.string()));
    const auto js = nlohmann::json::parse(slurp(sup / "summary.json"));
    const auto jf = nlohmann::json::parse(slurp(full / "summary.json"));
    CHECK(js["baseline_test_error"].get<double>() == jf["baseline_test_error"].get<double>());
    CHECK(jf["error_delta"].get<double>() ==
          jf["final_test_error"].get<double>() - jf["baseline_test_error"].get<double>());
    CHECK(slurp(sup / "checkpoint_stage1.d2ck") == slurp(full / "checkpoint_stage1.d2ck"));
}

TEST_CASE("diagnose reuses a saved checkpoint and snapshot") {
    const auto full = scratch("full_for_diag");
    run_or_throw(tiny(Mode::R2D2, full.string()));
    const auto diag = scratch("diag");
    auto c = tiny(Mode::Diagnose, diag.string());
    c.checkpoint = (full / "checkpoint_stage2.d2ck").string();
    c.pseudo_snapshot = (full / "pseudo_stage2.d2pl").string();
    run_or_throw(c);
    const auto j = nlohmann::json::parse(slurp(diag / "summary.json"));
    CHECK(j["diagnostics"]["scored"].get<std::size_t>() == 80);

    auto wrong = c;
    wrong.classes = 3;
    wrong.out = scratch("diag_wrong").string();
    CHECK_THROWS_AS(run_or_throw(wrong), ConfigError);
}

TEST_CASE("run maps failures to exit codes") {
    auto c = tiny(Mode::R2D2, "");
    CHECK(run(c) == kExitConfig);
    c.out = scratch("nan").string();
    c.plan.stage1.lr0 = 1e300;
    CHECK(run(c) == kExitNumeric);
    auto d = tiny(Mode::Diagnose, scratch("missing_ckpt").string());
    d.checkpoint = "/nonexistent/ckpt.d2ck";
    CHECK(run(d) == kExitIo);
}

TEST_CASE("command line") {
    const auto cfg = tiny_config_file().string();
    const auto out = scratch("cli");
    CHECK(cli("r2d2 --config " + cfg + " --seed 3 --out " + out.string()) == 0);
    CHECK(fs::exists(out / "summary.json"));
    const auto resolved = parse_config(slurp(out / "config_resolved"));
    CHECK(resolved.seed == 3);
    CHECK(resolved.out == out.string());

    CHECK(cli("r2d2 --config " + cfg + " --alpha=banana --out " + scratch("bad").string()) == 2);
    CHECK(cli("r2d2 --config " + cfg + " --no_such_key 1 --out " + scratch("bad").string()) == 2);
    CHECK(cli("frobnicate --config " + cfg + " --out " + scratch("bad").string()) == 2);
    CHECK(cli("r2d2 --config /nonexistent/file.cfg --out " + scratch("bad").string()) == 3);
    CHECK(cli("r2d2 --config " + cfg + " --stage1_lr 1e300 --out " + scratch("bad").string()) == 4);
}
