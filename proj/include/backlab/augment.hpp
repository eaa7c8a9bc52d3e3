#pragma once
// Stochastic image augmentations for view generation.

#include "backlab/common.hpp"
#include "backlab/image.hpp"

namespace backlab::data {

struct AugmentationPolicy {
    // random resized crop
    bool crop = true;
    double crop_scale_min = 0.2, crop_scale_max = 1.0;
    double crop_ratio_min = 0.75, crop_ratio_max = 4.0 / 3.0;
    // pad-then-crop (supervised recipe); mutually exclusive with `crop`
    int pad_crop = 0;
    bool hflip = true;
    double hflip_p = 0.5;
    double jitter_p = 0.0;
    double jitter_strength = 0.4;  // brightness/contrast/saturation factor range
    double hue_delta = 0.1;        // hue rotation, fraction of full turn
    double grayscale_p = 0.0;

    static AugmentationPolicy contrastive();  // crop + flip + jitter + grayscale
    static AugmentationPolicy supervised();   // reflect-pad 4, crop, flip
    static AugmentationPolicy none();
};

Image augment(const Image& img, const AugmentationPolicy& p, Rng& rng);

Image resize_bilinear(const Image& img, int out_h, int out_w);

}  // namespace backlab::data
