#pragma once
// Experiment pipelines: attack runs, defense dispatch, analysis reruns,
// reports, and trigger-strength sweeps. Every run writes into its own
// timestamped directory; a manifest ties together the config hash, artifact
// paths, per-stage wall-clock, and headline metrics.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "backlab/analysis.hpp"
#include "backlab/config.hpp"
#include "json.hpp"

namespace backlab::run {

extern const char* kToolkitVersion;

struct StageTime {
    std::string stage;
    double seconds = 0.0;
};

struct RunManifest {
    std::string config_hash;
    std::string version;
    std::string run_dir;
    std::map<std::string, std::string> artifacts;  // key -> path relative to run_dir
    std::vector<StageTime> stages;
    nlohmann::json metrics;
    std::string failed_stage;  // empty on success

    // Absolute path of an artifact; a missing key raises an error naming the
    // stage that produces it, a missing file raises a file error.
    std::string path(const std::string& key) const;
    void add(const std::string& key, const std::string& rel_path);
    // Writes run_dir/manifest.json after checking that every referenced
    // artifact file exists.
    void save() const;
    static RunManifest load(const std::string& manifest_path);
};

// <root>/<name>-<UTC stamp>-<hash8>, never reusing an existing directory.
// The BACKLAB_OUT environment variable overrides cfg.output_root.
std::string make_run_dir(const config::ExperimentConfig& cfg);

// Full attack pipeline: data -> poison -> train -> downstream -> evaluate ->
// export -> analysis. On a stage failure the partial manifest (with
// failed_stage set) is saved before the error propagates.
RunManifest run_attack(const config::ExperimentConfig& cfg);

// Applies every defense block in the config to an existing attack run,
// appending artifacts and stage timings to the manifest.
void run_defense(const config::ExperimentConfig& cfg, RunManifest& manifest);

// Recomputes entanglement/MI from the exported banks, rewrites the analysis
// artifacts, and returns the summary (proves the artifacts re-derive).
nlohmann::json analyze_manifest(const RunManifest& manifest);

// Markdown summary plus SVG charts for one or more runs. Output bytes depend
// only on the manifests' artifacts.
void emit_report(const std::vector<std::string>& manifest_paths, const std::string& out_dir);

// One in-memory attack evaluation (poison -> train -> classifier -> ACC/ASR/
// MI/ER) at the configured trigger strength; used per sweep grid point.
analysis::SweepPoint evaluate_attack_point(const config::ExperimentConfig& cfg,
                                           const data::ImageDataset& train_clean,
                                           const data::ImageDataset& test_clean);

// Sweeps the trigger-strength knob over `grid`, writing sweep.csv and
// sweep.svg under out_dir. Failing points are recorded and skipped.
std::vector<analysis::SweepPoint> run_sweep(const config::ExperimentConfig& cfg,
                                            const std::vector<double>& grid,
                                            const std::string& out_dir);

// Default sweep grid for a trigger family (6 points, weak to strong).
std::vector<double> default_strength_grid(trigger::TriggerKind kind);

}  // namespace backlab::run
