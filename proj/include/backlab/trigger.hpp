#pragma once
// Trigger synthesis and application: patch overlays, spectral (DCT-domain)
// perturbations, and sampling-mode logic for generator-based triggers.

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <vector>

#include "backlab/common.hpp"
#include "backlab/image.hpp"

namespace backlab::trigger {

// ---- colorspace -----------------------------------------------------------
// BT.601 full-range RGB <-> YCbCr on [0,1] pixels. Chroma planes carry the
// +0.5 offset; the inverse uses the exact matrix inverse of the forward map.
Image rgb_to_ycbcr(const Image& rgb);
Image ycbcr_to_rgb(const Image& ycc);

// ---- 2-D DCT --------------------------------------------------------------
// Orthonormal DCT-II basis of size n (cached). dct2(X) = D_r * X * D_c^T for
// an r x c block; idct2 is the transpose pair, an exact inverse.
const Eigen::MatrixXd& dct_matrix(int n);
Eigen::MatrixXd block_dct2(const Eigen::MatrixXd& block);
Eigen::MatrixXd block_idct2(const Eigen::MatrixXd& coeffs);

// ---- trigger specs --------------------------------------------------------
enum class TriggerKind { universal, functional, dynamic_gen };

enum class Placement { random_pos, fixed };

struct UniversalTrigger {
    int side = 5;
    std::uint64_t patch_seed = 1;
    Placement placement = Placement::random_pos;
    int fixed_y = 0, fixed_x = 0;
    double alpha = 1.0;  // 1.0 replaces pixels outright
    Image patch;         // concrete pixels; regenerated when side changes
};

struct FunctionalTrigger {
    double magnitude = 100.0;  // 8-bit units; applied in [0,1] as magnitude/255
    int block = 32;
    std::vector<int> bands = {15, 31};    // diagonal coefficient indices
    std::vector<int> channels = {1, 2};   // YCbCr plane indices (Cb, Cr)
    bool strict_blocks = false;           // refuse images not tiled by `block`
};

struct DynamicTrigger {
    double rho_a = 0.1;            // backdoor-mode fraction
    double rho_b = 0.1;            // cross-trigger-mode fraction
    double amplitude = 16.0 / 255.0;  // residual bound (post-tanh scale)
    int base_channels = 8;
    std::uint64_t init_seed = 1;
};

struct TriggerSpec {
    TriggerKind kind = TriggerKind::functional;
    UniversalTrigger uni;
    FunctionalTrigger fun;
    DynamicTrigger dyn;
};

Image make_universal_patch(int side, std::uint64_t seed);
// Fills spec.uni.patch from (side, patch_seed); no-op side 0 allowed.
void ensure_patch(TriggerSpec& spec);

struct PatchPlacement {
    int y = 0, x = 0;
};

// Overlays the patch; placement drawn from rng in random_pos mode. Output is
// clipped to [0,1]. side 0 returns the input unchanged.
Image apply_universal(const Image& img, const UniversalTrigger& uni, Rng& rng,
                      PatchPlacement* placed = nullptr);

// Spectral trigger: YCbCr -> per-block orthonormal DCT -> add magnitude/255 to
// the configured diagonal coefficients of the chroma planes -> inverse -> RGB,
// clipping last. Edge blocks use the truncated-size transform unless
// strict_blocks is set, in which case a non-tiling image is an error.
Image apply_functional(const Image& img, const FunctionalTrigger& fun);

// ---- dynamic (generator) sampling ----------------------------------------
// The generator is supplied as a closure producing a bounded residual for a
// source image; this keeps the sampler independent of the network engine.
using GeneratorFn = std::function<Image(const Image&)>;

enum class DynMode : std::uint8_t { clean = 0, backdoor = 1, cross = 2 };

struct DynBatch {
    std::vector<Image> images;
    std::vector<int> labels;
    std::vector<DynMode> modes;
    std::vector<int> cross_partner;  // -1 except in cross mode
};

// Per-sample mode draw: backdoor with prob rho_a (residual from own image,
// label -> target), cross with prob rho_b (residual from another batch
// element, label kept), else untouched.
DynBatch dynamic_mode_sampler(const std::vector<Image>& images, const std::vector<int>& labels,
                              int target_class, const GeneratorFn& gen, double rho_a,
                              double rho_b, Rng& rng);

Image add_residual(const Image& img, const Image& residual);

// ---- strength -------------------------------------------------------------
// One scalar knob per trigger family: patch side (universal), magnitude in
// 8-bit units (functional), residual amplitude in 8-bit units (dynamic).
void set_strength(TriggerSpec& spec, double value);
double get_strength(const TriggerSpec& spec);

const char* kind_name(TriggerKind k);
TriggerKind kind_from_name(const std::string& name);

}  // namespace backlab::trigger
