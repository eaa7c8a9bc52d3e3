#pragma once
// Training loops (supervised and three contrastive methods), loss-dynamics
// logging, downstream heads, and model checkpoint helpers.

#include <optional>

#include "backlab/augment.hpp"
#include "backlab/backbone.hpp"
#include "backlab/dataset.hpp"
#include "backlab/losses.hpp"

namespace backlab::train {

enum class Method { supervised, simclr, byol, moco };
const char* method_name(Method m);
Method method_from_name(const std::string& s);
bool is_contrastive(Method m);

struct TrainConfig {
    Method method = Method::simclr;
    int epochs = 20;
    int batch_size = 128;
    double lr = 0.06;  // reference defaults: 0.06 contrastive, 0.1 supervised
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double tau = 0.5;
    double byol_ema = 0.996;
    double moco_ema = 0.999;
    int moco_queue = 4096;
    std::uint64_t seed = 1;
    data::AugmentationPolicy aug = data::AugmentationPolicy::contrastive();
    bool log_per_sample = true;
    int generator_epochs = 10;  // joint generator training window (dynamic trigger)

    void validate() const;
};

// Per-epoch means plus (optionally) the full per-sample loss trace. The
// poison column tracks rows that actually carried a trigger that epoch.
struct DynamicsLog {
    std::vector<int> epoch;
    std::vector<double> clean_loss, poison_loss, lr;
    std::vector<std::vector<double>> per_sample;  // [epoch][row]

    int epochs() const { return static_cast<int>(epoch.size()); }
    void save_csv(const std::string& path) const;          // epoch,clean,poison,lr
    void save_trace(const std::string& path) const;        // per-sample matrix
    static DynamicsLog load_csv(const std::string& path);  // summary only
    static std::vector<std::vector<double>> load_trace(const std::string& path);
};

struct TrainResult {
    nn::EncoderModel encoder;
    std::optional<nn::Classifier> classifier;   // supervised runs
    std::optional<nn::GeneratorNet> generator;  // dynamic-trigger runs
    DynamicsLog log;
};

// Trains on an already-poisoned dataset (static triggers), or with per-batch
// trigger sampling and joint generator updates when spec->trig is dynamic.
// poison_flags marks statically poisoned rows for loss bookkeeping.
TrainResult train(const data::ImageDataset& train_set, const std::vector<bool>& poison_flags,
                  const nn::EncoderConfig& enc_cfg, const TrainConfig& cfg,
                  const data::PoisonSpec* dyn_spec = nullptr);

// Backbone features for every row (eval mode, no augmentation); rows in
// dataset order. projected=true returns projection-head outputs instead.
nn::Tensor encode_dataset(nn::EncoderModel& enc, const data::ImageDataset& ds, int batch_size,
                          bool projected = false);

enum class DownstreamMode { linear_probe, fine_tune };

struct DownstreamConfig {
    DownstreamMode mode = DownstreamMode::linear_probe;
    int epochs = 40;
    double lr = 0.5;  // probe on frozen features; fine-tune wants ~0.01
    int batch_size = 256;
    std::uint64_t seed = 7;
    data::AugmentationPolicy aug = data::AugmentationPolicy::supervised();
};

// linear_probe trains a head on frozen features (encoder left bitwise
// untouched); fine_tune unfreezes the whole stack.
nn::Classifier fit_downstream(const nn::EncoderModel& enc, const data::ImageDataset& labeled,
                              const DownstreamConfig& cfg);

// ---- checkpoints -----------------------------------------------------------

void save_encoder(const std::string& path, const nn::EncoderModel& enc);
nn::EncoderModel load_encoder(const std::string& path);
void save_classifier(const std::string& path, const nn::Classifier& clf);
nn::Classifier load_classifier(const std::string& path);
void save_generator(const std::string& path, const nn::GeneratorNet& gen);
nn::GeneratorNet load_generator(const std::string& path);

std::string encoder_config_to_json(const nn::EncoderConfig& cfg, int trunc_stage,
                                   int trunc_unit);
nn::EncoderConfig encoder_config_from_json(const std::string& j, int* trunc_stage = nullptr,
                                           int* trunc_unit = nullptr);

}  // namespace backlab::train
