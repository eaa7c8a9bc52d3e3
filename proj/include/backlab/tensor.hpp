#pragma once
// Dense float tensor (row-major, NCHW for activations) used by the network
// engine. Images convert to float here; losses accumulate in double.

#include <cstdint>
#include <string>
#include <vector>

#include "backlab/common.hpp"
#include "backlab/image.hpp"

namespace backlab::nn {

struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)) {
        data.assign(numel_of(shape), fill);
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            check(d >= 0, "tensor: negative dimension");
            n *= static_cast<std::size_t>(d);
        }
        return s.empty() ? 0 : n;
    }

    std::size_t numel() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    void zero() { std::fill(data.begin(), data.end(), 0.0f); }
    std::string shape_str() const;
};

// He-style fan-in init for conv/linear weights.
void init_kaiming(Tensor& t, int fan_in, Rng& rng);

// Batch assembly: HWC double images -> NCHW float tensor.
Tensor images_to_tensor(const std::vector<Image>& images);
Tensor images_to_tensor(const std::vector<const Image*>& images);
Image tensor_to_image(const Tensor& t, int n);

}  // namespace backlab::nn
