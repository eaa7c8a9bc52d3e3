#pragma once
// Minimal training engine: layers with explicit forward/backward, an SGD
// optimizer with momentum/weight-decay/cosine schedule, and EMA tracking.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "backlab/tensor.hpp"

namespace backlab::nn {

struct NamedTensor {
    std::string name;
    Tensor* value = nullptr;
    Tensor* grad = nullptr;   // null for buffers (running stats)
    bool decay = false;       // weight decay applies
};

struct Layer {
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x, bool train) = 0;
    // Gradient w.r.t. input; parameter gradients accumulate into the layer.
    virtual Tensor backward(const Tensor& grad_out) = 0;
    virtual void collect(const std::string& prefix, std::vector<NamedTensor>& out) {
        (void)prefix;
        (void)out;
    }
    // Depth-first enumeration of primitive layers (composites recurse).
    virtual void visit(const std::function<void(Layer*)>& fn) { fn(this); }
    virtual const char* type() const = 0;
};

using LayerPtr = std::unique_ptr<Layer>;

struct Conv2d : Layer {
    int cin, cout, k, stride, pad, groups;
    bool has_bias;
    Tensor W, gW, b, gb;
    Tensor cached_x;

    Conv2d(int cin_, int cout_, int k_, int stride_, int pad_, Rng& rng, int groups_ = 1,
           bool bias = false);
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
    const char* type() const override { return "conv2d"; }
    void zero_out_channel(int oc);  // zeroes the channel's kernel (and bias)
};

struct BatchNorm2d : Layer {
    int c;
    double momentum = 0.1, eps = 1e-5;
    Tensor gamma, beta, ggamma, gbeta;
    Tensor running_mean, running_var;
    // caches
    Tensor xhat;
    std::vector<float> invstd;
    bool cached_train = false;

    explicit BatchNorm2d(int c_);
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
    const char* type() const override { return "batchnorm2d"; }
    void zero_channel(int ch);  // gamma/beta -> 0 (prune support)
};

struct ReLU : Layer {
    Tensor cached_out;
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    const char* type() const override { return "relu"; }
};

struct Tanh : Layer {
    Tensor cached_out;
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    const char* type() const override { return "tanh"; }
};

struct Linear : Layer {
    int in, out;
    Tensor W, gW, b, gb;
    Tensor cached_x;
    Linear(int in_, int out_, Rng& rng);
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
    const char* type() const override { return "linear"; }
};

struct GlobalAvgPool : Layer {
    std::vector<int> cached_shape;
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    const char* type() const override { return "gap"; }
};

struct Upsample2x : Layer {  // nearest neighbor
    std::vector<int> cached_shape;
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    const char* type() const override { return "upsample2x"; }
};

struct Sequential : Layer {
    std::vector<LayerPtr> layers;
    Sequential() = default;
    void add(LayerPtr l) { layers.push_back(std::move(l)); }
    Tensor forward(const Tensor& x, bool train) override;
    Tensor backward(const Tensor& gy) override;
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) override;
    void visit(const std::function<void(Layer*)>& fn) override;
    const char* type() const override { return "sequential"; }
};

// ---- optimization -----------------------------------------------------------

void zero_grads(std::vector<NamedTensor>& params);

struct SGD {
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<NamedTensor> params;  // entries with grad != nullptr
    std::vector<std::vector<float>> velocity;

    void attach(const std::vector<NamedTensor>& all);
    void step(double lr);
};

// Cosine schedule over epochs: lr(e) = lr0 * 0.5 * (1 + cos(pi * e / total)).
double cosine_lr(double lr0, int epoch, int total_epochs);

// In-place EMA of `src` into `dst` (matched tensor lists): dst = decay*dst +
// (1-decay)*src. Buffers (running stats) are updated the same way.
void ema_update(std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src, double decay);
void copy_tensors(std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src);

}  // namespace backlab::nn
