#pragma once
// Encoder backbones (four small conv families with a common stage/unit
// layout), projection heads, the trigger generator network, classifiers, and
// checkpoint serialization.

#include <map>

#include "backlab/nn.hpp"

namespace backlab::nn {

enum class BackboneFamily { resnet18, resnet50, mobilenet, shufflenet };
const char* family_name(BackboneFamily f);
BackboneFamily family_from_name(const std::string& s);

struct BackboneConfig {
    BackboneFamily family = BackboneFamily::resnet18;
    double width_mult = 1.0;  // scales all stage widths
    int stem_stride = 1;
    std::uint64_t init_seed = 1;
};

// Residual block with two 3x3 convs (resnet18-style).
struct BasicBlock : Layer {
    Conv2d conv1, conv2;
    BatchNorm2d bn1, bn2;
    ReLU relu1, relu2;
    std::unique_ptr<Conv2d> sc_conv;
    std::unique_ptr<BatchNorm2d> sc_bn;
    Tensor cached_sc_out;

    BasicBlock(int cin, int cout, int stride, Rng& rng);
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void visit(const std::function<void(Layer*)>& fn) override;
    const char* type() const override { return "basic_block"; }
};

// 1x1 -> 3x3 -> 1x1 residual block (resnet50-style), expansion 4.
struct Bottleneck : Layer {
    Conv2d conv1, conv2, conv3;
    BatchNorm2d bn1, bn2, bn3;
    ReLU relu1, relu2, relu3;
    std::unique_ptr<Conv2d> sc_conv;
    std::unique_ptr<BatchNorm2d> sc_bn;

    Bottleneck(int cin, int mid, int cout, int stride, Rng& rng);
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void visit(const std::function<void(Layer*)>& fn) override;
    const char* type() const override { return "bottleneck"; }
};

// Expand 1x1 -> depthwise 3x3 -> project 1x1 (mobilenet-style), residual when
// the shape is preserved.
struct InvertedResidual : Layer {
    Conv2d expand, dw, project;
    BatchNorm2d bn1, bn2, bn3;
    ReLU relu1, relu2;
    bool use_res;

    InvertedResidual(int cin, int cout, int stride, int expand_ratio, Rng& rng);
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void visit(const std::function<void(Layer*)>& fn) override;
    const char* type() const override { return "inverted_residual"; }
};

// Channel-split unit with depthwise conv and a 2-group channel shuffle
// (shufflenet-style). Stride-2 units transform both halves.
struct ShuffleUnit : Layer {
    int cin, cout, stride;
    // right branch
    Conv2d r1, rdw, r2;
    BatchNorm2d rbn1, rbn2, rbn3;
    ReLU rrelu1, rrelu2;
    // left branch (stride 2 only)
    std::unique_ptr<Conv2d> ldw, l1;
    std::unique_ptr<BatchNorm2d> lbn1, lbn2;
    std::unique_ptr<ReLU> lrelu;
    std::vector<int> cached_in_shape;

    ShuffleUnit(int cin, int cout, int stride, Rng& rng);
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void visit(const std::function<void(Layer*)>& fn) override;
    const char* type() const override { return "shuffle_unit"; }
};

struct Backbone {
    BackboneConfig cfg;
    Sequential stem;
    std::vector<std::vector<LayerPtr>> stages;
    std::vector<std::vector<int>> unit_out_dims;
    GlobalAvgPool pool;
    int full_feature_dim = 0;
    // truncation point (1-based stage/unit); (0,0) means full depth
    int trunc_stage = 0, trunc_unit = 0;

    Tensor features(const Tensor& x, bool train);
    Tensor backward_features(const Tensor& gfeat);
    void collect(std::vector<NamedTensor>& out);
    void visit(const std::function<void(Layer*)>& fn);
    int feature_dim() const;
    void set_truncation(int l, int k);  // validates against the stage layout
};

Backbone build_backbone(const BackboneConfig& cfg);

struct EncoderConfig {
    BackboneConfig backbone;
    int proj_dim = 128;
    int proj_hidden = 0;  // 0 -> feature_dim
};

// Backbone plus 2-layer MLP projection head. Downstream evaluation consumes
// backbone features; contrastive losses consume projections.
struct EncoderModel {
    EncoderConfig cfg;
    Backbone backbone;
    Sequential projector;

    Tensor features(const Tensor& x, bool train) { return backbone.features(x, train); }
    Tensor project(const Tensor& feats, bool train) { return projector.forward(feats, train); }
    Tensor encode(const Tensor& x, bool train) {
        return project(features(x, train), train);
    }
    // full backward: gproj -> input gradient
    Tensor backward(const Tensor& gproj) {
        return backbone.backward_features(projector.backward(gproj));
    }
    void collect(std::vector<NamedTensor>& out);
    EncoderModel clone() const;
};

EncoderModel build_encoder(const EncoderConfig& cfg);

// Returns a deep copy whose backbone stops at unit (l, k); the projection
// head is rebuilt for the truncated width (fresh init, trained downstream).
EncoderModel truncate_encoder(const EncoderModel& enc, int l, int k);

// 2-layer MLP used for the BYOL predictor.
Sequential make_mlp(int in, int hidden, int out, Rng& rng);

struct GeneratorConfig {
    int base_channels = 8;
    double amplitude = 16.0 / 255.0;
    std::uint64_t init_seed = 1;
};

// Encoder-decoder producing a tanh-bounded residual, |r| <= amplitude.
struct GeneratorNet {
    GeneratorConfig cfg;
    Sequential net;

    Tensor residual(const Tensor& x, bool train);
    Tensor backward(const Tensor& gres);
    void collect(std::vector<NamedTensor>& out);
    Image residual_image(const Image& img);
};

GeneratorNet build_generator(const GeneratorConfig& cfg);

struct Classifier {
    EncoderModel enc;
    Linear head;
    int num_classes;

    Classifier(EncoderModel e, int classes, std::uint64_t head_seed);
    Tensor logits(const Tensor& x, bool train);
    Tensor penultimate(const Tensor& x, bool train) { return enc.features(x, train); }
    Tensor logits_from_features(const Tensor& f, bool train) { return head.forward(f, train); }
    // backward through head and encoder to the input (for trigger synthesis)
    Tensor backward_to_input(const Tensor& glogits);
    void collect(std::vector<NamedTensor>& out);
    Classifier clone() const;
};

// ---- checkpoints -------------------------------------------------------------

// Binary format: magic "BKLB", u32 version, u64 json length + config JSON,
// u64 tensor count, then per tensor: u32 name length, name bytes, u32 rank,
// u32 dims..., raw float32 data. Little-endian throughout.
void save_checkpoint(const std::string& path, const std::string& config_json,
                     const std::vector<NamedTensor>& tensors);
std::string load_checkpoint(const std::string& path, std::vector<NamedTensor>& into);
std::string checkpoint_config(const std::string& path);

}  // namespace backlab::nn
