#include "backlab/augment.hpp"

#include <algorithm>
#include <cmath>

namespace backlab::data {

AugmentationPolicy AugmentationPolicy::contrastive() {
    AugmentationPolicy p;
    p.crop = true;
    p.hflip = true;
    p.jitter_p = 0.8;
    p.grayscale_p = 0.2;
    return p;
}

AugmentationPolicy AugmentationPolicy::supervised() {
    AugmentationPolicy p;
    p.crop = false;
    p.pad_crop = 4;
    p.hflip = true;
    return p;
}

AugmentationPolicy AugmentationPolicy::none() {
    AugmentationPolicy p;
    p.crop = false;
    p.hflip = false;
    return p;
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    check(out_h > 0 && out_w > 0, "resize_bilinear: bad output size");
    Image out(out_h, out_w, img.c);
    const double sy = static_cast<double>(img.h) / out_h;
    const double sx = static_cast<double>(img.w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::min((y + 0.5) * sy - 0.5, img.h - 1.0);
        const int y0 = std::max(0, static_cast<int>(std::floor(fy)));
        const int y1 = std::min(img.h - 1, y0 + 1);
        const double wy = std::clamp(fy - y0, 0.0, 1.0);
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::min((x + 0.5) * sx - 0.5, img.w - 1.0);
            const int x0 = std::max(0, static_cast<int>(std::floor(fx)));
            const int x1 = std::min(img.w - 1, x0 + 1);
            const double wx = std::clamp(fx - x0, 0.0, 1.0);
            for (int ch = 0; ch < img.c; ++ch) {
                const double top = (1 - wx) * img.at(y0, x0, ch) + wx * img.at(y0, x1, ch);
                const double bot = (1 - wx) * img.at(y1, x0, ch) + wx * img.at(y1, x1, ch);
                out.at(y, x, ch) = (1 - wy) * top + wy * bot;
            }
        }
    }
    return out;
}

namespace {

Image crop_region(const Image& img, int y0, int x0, int ch, int cw) {
    Image out(ch, cw, img.c);
    for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x)
            for (int k = 0; k < img.c; ++k) out.at(y, x, k) = img.at(y0 + y, x0 + x, k);
    return out;
}

Image random_resized_crop(const Image& img, const AugmentationPolicy& p, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double area = static_cast<double>(img.h) * img.w;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double s = p.crop_scale_min + (p.crop_scale_max - p.crop_scale_min) * u(rng);
        const double logr = std::log(p.crop_ratio_min) +
                            (std::log(p.crop_ratio_max) - std::log(p.crop_ratio_min)) * u(rng);
        const double r = std::exp(logr);
        const int cw = static_cast<int>(std::lround(std::sqrt(area * s * r)));
        const int ch = static_cast<int>(std::lround(std::sqrt(area * s / r)));
        if (cw < 1 || ch < 1 || cw > img.w || ch > img.h) continue;
        std::uniform_int_distribution<int> dy(0, img.h - ch), dx(0, img.w - cw);
        return resize_bilinear(crop_region(img, dy(rng), dx(rng), ch, cw), img.h, img.w);
    }
    return img;  // fall back to identity when no box fits
}

Image reflect_pad_crop(const Image& img, int pad, Rng& rng) {
    const int H = img.h + 2 * pad, W = img.w + 2 * pad;
    Image padded(H, W, img.c);
    auto reflect = [](int i, int n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
        return std::clamp(i, 0, n - 1);
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int k = 0; k < img.c; ++k)
                padded.at(y, x, k) = img.at(reflect(y - pad, img.h), reflect(x - pad, img.w), k);
    std::uniform_int_distribution<int> d(0, 2 * pad);
    const int y0 = d(rng), x0 = d(rng);
    return crop_region(padded, y0, x0, img.h, img.w);
}

double luma(const Image& img, int y, int x) {
    return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

void color_jitter(Image& img, double strength, double hue_delta, Rng& rng) {
    std::uniform_real_distribution<double> f(1.0 - strength, 1.0 + strength);
    std::uniform_real_distribution<double> hd(-hue_delta, hue_delta);
    const double fb = f(rng), fc = f(rng), fs = f(rng), dh = hd(rng);

    double mean_luma = 0.0;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) mean_luma += luma(img, y, x);
    mean_luma /= img.h * img.w;

    const double pi = std::acos(-1.0);
    const double ca = std::cos(2 * pi * dh), sa = std::sin(2 * pi * dh);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double r = img.at(y, x, 0), g = img.at(y, x, 1), b = img.at(y, x, 2);
            // brightness, then contrast about the image mean
            r *= fb; g *= fb; b *= fb;
            r = mean_luma + (r - mean_luma) * fc;
            g = mean_luma + (g - mean_luma) * fc;
            b = mean_luma + (b - mean_luma) * fc;
            // saturation about per-pixel luma
            const double l = 0.299 * r + 0.587 * g + 0.114 * b;
            r = l + (r - l) * fs;
            g = l + (g - l) * fs;
            b = l + (b - l) * fs;
            // hue: rotate the chroma plane
            const double y601 = 0.299 * r + 0.587 * g + 0.114 * b;
            double cb = -0.168736 * r - 0.331264 * g + 0.5 * b;
            double cr = 0.5 * r - 0.418688 * g - 0.081312 * b;
            const double cb2 = ca * cb - sa * cr, cr2 = sa * cb + ca * cr;
            r = y601 + 1.402 * cr2;
            g = y601 - 0.344136 * cb2 - 0.714136 * cr2;
            b = y601 + 1.772 * cb2;
            img.at(y, x, 0) = r;
            img.at(y, x, 1) = g;
            img.at(y, x, 2) = b;
        }
    clip01(img);
}

void to_grayscale(Image& img) {
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const double l = luma(img, y, x);
            img.at(y, x, 0) = img.at(y, x, 1) = img.at(y, x, 2) = l;
        }
}

}  // namespace

Image augment(const Image& img, const AugmentationPolicy& p, Rng& rng) {
    Image out = img;
    if (p.crop)
        out = random_resized_crop(out, p, rng);
    else if (p.pad_crop > 0)
        out = reflect_pad_crop(out, p.pad_crop, rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (p.hflip && u(rng) < p.hflip_p) {
        for (int y = 0; y < out.h; ++y)
            for (int x = 0; x < out.w / 2; ++x)
                for (int k = 0; k < out.c; ++k)
                    std::swap(out.at(y, x, k), out.at(y, out.w - 1 - x, k));
    }
    if (out.c == 3) {
        if (p.jitter_p > 0 && u(rng) < p.jitter_p)
            color_jitter(out, p.jitter_strength, p.hue_delta, rng);
        if (p.grayscale_p > 0 && u(rng) < p.grayscale_p) to_grayscale(out);
    }
    return out;
}

}  // namespace backlab::data
