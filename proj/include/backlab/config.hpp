#pragma once
// Experiment configuration: JSON schema, strict parsing, and semantic hashing.

#include <string>
#include <vector>

#include "backlab/analysis.hpp"
#include "backlab/dataset.hpp"
#include "backlab/train.hpp"
#include "json.hpp"

namespace backlab::config {

// Raised for malformed configs (unknown keys, bad values, unreadable files) so
// the CLI can report them with a dedicated exit code.
struct ConfigError : error {
    using error::error;
};

// Throws ConfigError when `j` is not an object or holds a key outside
// `allowed`; `ctx` names the block in the message.
void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& allowed,
                    const std::string& ctx);

struct DatasetConfig {
    std::string kind = "synthetic";  // "synthetic" | "manifest"
    std::string name = "synth";
    int train_size = 3500;
    int test_size = 800;
    int num_classes = 10;
    int image_size = 32;
    std::uint64_t seed = 5;
    std::string train_manifest;  // manifest kind only
    std::string test_manifest;

    void validate() const;
};

struct AnalysisConfig {
    analysis::ERParams er;
    int mi_k = 5;
    int mi_max_n = 2000;
    std::uint64_t mi_seed = 9;
    int eval_batch = 256;
};

struct ExperimentConfig {
    std::string name = "run";
    DatasetConfig dataset;
    data::PoisonSpec attack;
    std::uint64_t poison_seed = 11;
    train::TrainConfig training;
    std::string training_aug = "contrastive";  // preset: contrastive|supervised|none
    nn::EncoderConfig encoder;
    train::DownstreamConfig downstream;
    std::string downstream_aug = "supervised";
    AnalysisConfig analysis;
    std::vector<nlohmann::json> defenses;  // validated per-kind at parse time
    std::string output_root = "runs";

    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::string& path);
    void save(const std::string& path) const;

    // FNV-1a over the canonical (sorted-key) serialization with `name` and
    // `output_root` removed: those only label and place artifacts, so two
    // configs that run the same experiment hash alike. 16 hex digits.
    std::string hash() const;
};

// Per-kind whitelist check for a defense block; `idx` is its position in the
// defenses array (for error messages). Returns the block's kind.
std::string validate_defense_entry(const nlohmann::json& entry, int idx);

data::AugmentationPolicy aug_preset(const std::string& name);

}  // namespace backlab::config
