#pragma once
// Labeled image datasets, poisoning specs, and poisoned-set construction.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "backlab/common.hpp"
#include "backlab/image.hpp"
#include "backlab/trigger.hpp"

namespace backlab::data {

struct ImageDataset {
    std::string name;
    std::string split;  // "train" or "test"
    int num_classes = 0;
    std::vector<Image> images;
    std::vector<int> labels;

    int size() const { return static_cast<int>(images.size()); }
    void validate() const;
};

// Manifest loader. The manifest is a CSV with header `path,label,split`;
// image paths are resolved relative to the manifest's directory.
ImageDataset load_manifest(const std::string& manifest_path, const std::string& split,
                           const std::string& name = "");

// Writes dataset images as PNGs under dir/ and a manifest.csv beside them.
void save_as_manifest(const ImageDataset& ds, const std::string& dir);

// Deterministic synthetic corpus: each class mixes a base hue, an oriented
// sinusoidal texture, and a soft blob, plus per-image jitter and noise. Used
// for desk-scale runs; any directory of PNGs works through load_manifest.
ImageDataset make_synthetic(const std::string& name, const std::string& split, int n,
                            int num_classes, int hw, std::uint64_t seed);

// ---- poisoning -------------------------------------------------------------

enum class SelectionMode { target_class, all_classes };
enum class LabelMode { clean, relabel_target };

struct PoisonSpec {
    int target_class = 0;
    double rate = 0.01;  // fraction of the full training set
    SelectionMode selection = SelectionMode::target_class;
    LabelMode label_mode = LabelMode::relabel_target;
    trigger::TriggerSpec trig;

    void validate(int num_classes) const;
};

// Defaults per trigger family: patch/spectral triggers poison target-class
// rows (relabeling to t is then a no-op); generator triggers poison across all
// classes with relabeling, applied during training by the mode sampler.
PoisonSpec default_poison_spec(trigger::TriggerKind kind, int target_class, double rate);

struct PoisonEntry {
    int index = 0;
    int original_label = 0;
    // universal placement; unused fields stay zero for other kinds
    int patch_y = 0, patch_x = 0;
    double magnitude = 0.0;
};

struct PoisonRecord {
    std::uint64_t seed = 0;
    std::string trigger_kind;
    int target_class = 0;
    double rate = 0.0;
    std::string selection;
    std::string label_mode;
    std::vector<int> indices;  // ascending
    std::vector<PoisonEntry> entries;
    std::string spec_json;  // trigger spec echo

    std::vector<bool> flags(int n) const;
    void save(const std::string& path) const;
    static PoisonRecord load(const std::string& path);
};

// Number of rows to poison: round-half-up of rate * N.
int poison_count(double rate, int n);

std::vector<int> select_candidates(const ImageDataset& ds, const PoisonSpec& spec, Rng& rng);

// Applies the trigger to the selected rows (ascending index order, one RNG
// stream) and applies the label rule. Generator triggers are train-time
// constructs and are rejected here.
std::pair<ImageDataset, PoisonRecord> build_poisoned_dataset(const ImageDataset& ds,
                                                             const PoisonSpec& spec,
                                                             std::uint64_t seed);

// Triggered copies of test rows whose true label differs from the target
// class (attack success is measured off-target). Generator triggers need gen.
ImageDataset make_test_trigger_set(const ImageDataset& test_set, const PoisonSpec& spec,
                                   std::uint64_t seed,
                                   const trigger::GeneratorFn* gen = nullptr);

}  // namespace backlab::data
