// Command-line front end. Exit codes: 0 success, 2 configuration or usage
// errors, 3 pipeline stage failures.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "backlab/orchestrate.hpp"

namespace {

using backlab::config::ConfigError;
using nlohmann::json;

// Dotted-path config override: "training.epochs=8". Values parse as JSON when
// possible and fall back to bare strings, so --set training.method=moco works
// without quoting.
void apply_override(json& j, const std::string& kv) {
    auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("--set expects key.path=value, got: " + kv);
    std::string path = kv.substr(0, eq), val = kv.substr(eq + 1);
    json parsed;
    try {
        parsed = json::parse(val);
    } catch (const json::exception&) {
        parsed = val;
    }
    json* cur = &j;
    std::size_t pos = 0;
    while (true) {
        auto dot = path.find('.', pos);
        std::string part = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
        if (part.empty()) throw ConfigError("--set has an empty path segment: " + kv);
        if (dot == std::string::npos) {
            (*cur)[part] = parsed;
            break;
        }
        cur = &(*cur)[part];
        pos = dot + 1;
    }
}

backlab::config::ExperimentConfig load_config(const std::string& path,
                                              const std::vector<std::string>& sets,
                                              const std::string& out_root) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(backlab::strf("config parse error in ", path, ": ", e.what()));
    }
    for (const auto& kv : sets) apply_override(j, kv);
    auto cfg = backlab::config::ExperimentConfig::from_json(j);
    if (!out_root.empty()) cfg.output_root = out_root;
    return cfg;
}

std::vector<double> parse_grid(const std::string& s) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        auto comma = s.find(',', pos);
        std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!tok.empty()) {
            try {
                std::size_t used = 0;
                out.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw ConfigError("bad --grid value: " + tok);
            }
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty()) throw ConfigError("--grid parsed to an empty list");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"backlab: backdoor attack/defense research toolkit"};
    app.require_subcommand(1);

    std::string config_path, manifest_path, out_root, out_dir, grid_str;
    std::vector<std::string> sets, manifest_args;

    auto* attack = app.add_subcommand("attack", "poison, train, evaluate, export, analyze");
    attack->add_option("--config", config_path, "experiment config JSON")->required();
    attack->add_option("--set", sets, "override a config key, e.g. --set training.epochs=8");
    attack->add_option("--out-root", out_root,
                       "output root (overrides output_root; BACKLAB_OUT also applies)");

    auto* defend = app.add_subcommand("defend", "run the configured defenses on an attack run");
    defend->add_option("--manifest", manifest_path, "manifest.json of an attack run")->required();
    defend->add_option("--config", config_path,
                       "config with defense blocks (default: the run's own config)");
    defend->add_option("--set", sets, "override a config key");

    auto* analyze = app.add_subcommand("analyze", "recompute ER/MI from the exported banks");
    analyze->add_option("--manifest", manifest_path, "manifest.json of an attack run")->required();

    auto* sweep = app.add_subcommand("sweep", "trigger-strength sweep");
    sweep->add_option("--config", config_path, "experiment config JSON")->required();
    sweep->add_option("--grid", grid_str, "comma-separated strengths (default per trigger kind)");
    sweep->add_option("--set", sets, "override a config key");
    sweep->add_option("--out", out_dir, "output directory (default: fresh run dir)");
    sweep->add_option("--out-root", out_root, "output root for the default directory");

    auto* report = app.add_subcommand("report", "markdown + SVG report from manifests");
    report->add_option("--out", out_dir, "report output directory")->required();
    report->add_option("manifests", manifest_args, "manifest.json paths")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*attack) {
            auto cfg = load_config(config_path, sets, out_root);
            auto man = backlab::run::run_attack(cfg);
            std::cout << "run dir:  " << man.run_dir << "\n";
            std::cout << "manifest: " << man.run_dir << "/manifest.json\n";
            std::cout << man.metrics.dump(2) << "\n";
        } else if (*defend) {
            auto man = backlab::run::RunManifest::load(manifest_path);
            auto cfg = config_path.empty()
                           ? backlab::config::ExperimentConfig::load(man.path("config"))
                           : load_config(config_path, sets, "");
            if (cfg.defenses.empty()) throw ConfigError("config has no defense blocks to run");
            backlab::run::run_defense(cfg, man);
            std::cout << "defenses written under " << man.run_dir << "\n";
            for (const auto& [k, rel] : man.artifacts)
                if (k.rfind("defense.", 0) == 0) std::cout << "  " << k << ": " << rel << "\n";
        } else if (*analyze) {
            auto man = backlab::run::RunManifest::load(manifest_path);
            std::cout << backlab::run::analyze_manifest(man).dump(2) << "\n";
        } else if (*sweep) {
            auto cfg = load_config(config_path, sets, out_root);
            std::vector<double> grid =
                grid_str.empty() ? backlab::run::default_strength_grid(cfg.attack.trig.kind)
                                 : parse_grid(grid_str);
            std::string dir = out_dir;
            if (dir.empty()) {
                auto named = cfg;
                named.name += "-sweep";
                dir = backlab::run::make_run_dir(named);
            }
            auto points = backlab::run::run_sweep(cfg, grid, dir);
            std::cout << "sweep dir: " << dir << "\n";
            for (const auto& p : points) {
                if (p.ok)
                    std::cout << "  strength " << p.strength << ": acc=" << p.acc
                              << " asr=" << p.asr << " mi=" << p.mi_nats
                              << " er=" << p.er_pseudo << "\n";
                else
                    std::cout << "  strength " << p.strength << ": FAILED (" << p.error << ")\n";
            }
        } else if (*report) {
            backlab::run::emit_report(manifest_args, out_dir);
            std::cout << "report written to " << out_dir << "/report.md\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
