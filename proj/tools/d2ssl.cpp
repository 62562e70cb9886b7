#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "d2ssl/errors.hpp"
#include "d2ssl/experiment.hpp"

namespace {

// Turns the unparsed tail into key/value pairs; accepts `--key value` and `--key=value`.
std::vector<std::pair<std::string, std::string>> collect_overrides(const std::vector<std::string>& extras) {
    std::vector<std::pair<std::string, std::string>> out;
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const std::string& arg = extras[i];
        if (arg.rfind("--", 0) != 0 || arg.size() == 2) {
            throw d2ssl::ConfigError("unexpected argument '" + arg + "'");
        }
        const std::string body = arg.substr(2);
        if (const auto eq = body.find('='); eq != std::string::npos) {
            out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
            continue;
        }
        if (i + 1 >= extras.size()) {
            throw d2ssl::ConfigError("flag --" + body + ": missing value");
        }
        out.emplace_back(body, extras[++i]);
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semi-supervised training with optimizable pseudo-labels"};
    app.allow_extras();
    std::string mode;
    std::string config_path;
    std::string out;
    bool list_keys = false;
    app.add_option("mode", mode, "r2d2 | supervised_baseline | ablation | diagnose");
    app.add_option("--config", config_path, "flat key = value config file");
    app.add_option("--out", out, "output directory (default: $D2SSL_OUT_ROOT/<mode>)");
    app.add_flag("--list-keys", list_keys, "print every config key with its default and exit");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : d2ssl::kExitConfig;
    }

    try {
        if (list_keys) {
            std::cout << d2ssl::format_config(d2ssl::ExperimentConfig{});
            return d2ssl::kExitOk;
        }
        if (mode.empty()) {
            throw d2ssl::ConfigError("missing mode (r2d2, supervised_baseline, ablation or diagnose)");
        }
        std::string text;
        if (!config_path.empty()) {
            std::ifstream in(config_path, std::ios::binary);
            if (!in) {
                std::cerr << "d2ssl: I/O error: cannot read config " << config_path << '\n';
                return d2ssl::kExitIo;
            }
            std::stringstream ss;
            ss << in.rdbuf();
            text = ss.str();
        }
        auto overrides = collect_overrides(app.remaining());
        overrides.insert(overrides.begin(), {"mode", mode});
        if (!out.empty()) {
            overrides.emplace_back("out", out);
        }
        d2ssl::ExperimentConfig config = d2ssl::parse_config(text, overrides);
        if (config.out.empty()) {
            const char* root = std::getenv("D2SSL_OUT_ROOT");
            config.out = std::string(root && *root ? root : "d2ssl_runs") + "/" + mode;
        }
        for (const auto& w : config.warnings) {
            std::cerr << "d2ssl: warning: " << w << '\n';
        }
        return d2ssl::run(config);
    } catch (const d2ssl::ConfigError& e) {
        std::cerr << "d2ssl: configuration error: " << e.what() << '\n';
        return d2ssl::kExitConfig;
    }
}
