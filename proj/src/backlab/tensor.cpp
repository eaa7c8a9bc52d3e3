#include "backlab/tensor.hpp"

#include <cmath>

namespace backlab::nn {

std::string Tensor::shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void init_kaiming(Tensor& t, int fan_in, Rng& rng) {
    check(fan_in > 0, "init_kaiming: fan_in must be positive");
    std::normal_distribution<float> g(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    for (float& v : t.data) v = g(rng);
}

Tensor images_to_tensor(const std::vector<const Image*>& images) {
    check(!images.empty(), "images_to_tensor: empty batch");
    const Image& first = *images[0];
    Tensor t({static_cast<int>(images.size()), first.c, first.h, first.w});
    const std::size_t plane = static_cast<std::size_t>(first.h) * first.w;
    for (std::size_t n = 0; n < images.size(); ++n) {
        const Image& img = *images[n];
        check(img.same_shape(first), "images_to_tensor: mixed shapes in batch");
        float* dst = t.data.data() + n * first.c * plane;
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                for (int ch = 0; ch < img.c; ++ch)
                    dst[ch * plane + y * img.w + x] = static_cast<float>(img.at(y, x, ch));
    }
    return t;
}

Tensor images_to_tensor(const std::vector<Image>& images) {
    std::vector<const Image*> ptrs;
    ptrs.reserve(images.size());
    for (const auto& im : images) ptrs.push_back(&im);
    return images_to_tensor(ptrs);
}

Image tensor_to_image(const Tensor& t, int n) {
    check(t.rank() == 4, "tensor_to_image: expected NCHW tensor, got ", t.shape_str());
    check(n >= 0 && n < t.dim(0), "tensor_to_image: batch index out of range");
    const int c = t.dim(1), h = t.dim(2), w = t.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const float* src = t.data.data() + static_cast<std::size_t>(n) * c * plane;
    Image img(h, w, c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) img.at(y, x, ch) = src[ch * plane + y * w + x];
    return img;
}

}  // namespace backlab::nn
