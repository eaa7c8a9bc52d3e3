#include "backlab/trigger.hpp"

#include <cmath>
#include <map>
#include <mutex>

namespace backlab::trigger {

namespace {

Eigen::Matrix3d forward_ycc_matrix() {
    Eigen::Matrix3d m;
    // BT.601 full-range
    m << 0.299, 0.587, 0.114,          //
        -0.168736, -0.331264, 0.5,     //
        0.5, -0.418688, -0.081312;     //
    return m;
}

const Eigen::Matrix3d kFwd = forward_ycc_matrix();
const Eigen::Matrix3d kInv = forward_ycc_matrix().inverse();

}  // namespace

Image rgb_to_ycbcr(const Image& rgb) {
    check(rgb.c == 3, "rgb_to_ycbcr: expected 3 channels, got ", rgb.c);
    Image out(rgb.h, rgb.w, 3);
    for (int y = 0; y < rgb.h; ++y)
        for (int x = 0; x < rgb.w; ++x) {
            const Eigen::Vector3d p(rgb.at(y, x, 0), rgb.at(y, x, 1), rgb.at(y, x, 2));
            const Eigen::Vector3d q = kFwd * p;
            out.at(y, x, 0) = q[0];
            out.at(y, x, 1) = q[1] + 0.5;
            out.at(y, x, 2) = q[2] + 0.5;
        }
    return out;
}

Image ycbcr_to_rgb(const Image& ycc) {
    check(ycc.c == 3, "ycbcr_to_rgb: expected 3 channels, got ", ycc.c);
    Image out(ycc.h, ycc.w, 3);
    for (int y = 0; y < ycc.h; ++y)
        for (int x = 0; x < ycc.w; ++x) {
            const Eigen::Vector3d q(ycc.at(y, x, 0), ycc.at(y, x, 1) - 0.5,
                                    ycc.at(y, x, 2) - 0.5);
            const Eigen::Vector3d p = kInv * q;
            out.at(y, x, 0) = p[0];
            out.at(y, x, 1) = p[1];
            out.at(y, x, 2) = p[2];
        }
    return out;
}

const Eigen::MatrixXd& dct_matrix(int n) {
    check(n >= 1, "dct_matrix: size must be positive, got ", n);
    static std::map<int, Eigen::MatrixXd> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    Eigen::MatrixXd d(n, n);
    const double pi = std::acos(-1.0);
    for (int k = 0; k < n; ++k) {
        const double a = (k == 0) ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (int i = 0; i < n; ++i) d(k, i) = a * std::cos(pi * (2 * i + 1) * k / (2.0 * n));
    }
    return cache.emplace(n, std::move(d)).first->second;
}

Eigen::MatrixXd block_dct2(const Eigen::MatrixXd& block) {
    const auto& dr = dct_matrix(static_cast<int>(block.rows()));
    const auto& dc = dct_matrix(static_cast<int>(block.cols()));
    return dr * block * dc.transpose();
}

Eigen::MatrixXd block_idct2(const Eigen::MatrixXd& coeffs) {
    const auto& dr = dct_matrix(static_cast<int>(coeffs.rows()));
    const auto& dc = dct_matrix(static_cast<int>(coeffs.cols()));
    return dr.transpose() * coeffs * dc;
}

Image make_universal_patch(int side, std::uint64_t seed) {
    check(side >= 0, "make_universal_patch: side must be >= 0, got ", side);
    Image patch(side, side, 3);
    Rng rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& v : patch.v) v = u(rng);
    return patch;
}

void ensure_patch(TriggerSpec& spec) {
    if (spec.kind != TriggerKind::universal) return;
    auto& uni = spec.uni;
    if (uni.patch.h != uni.side || uni.patch.w != uni.side || uni.patch.c != 3)
        uni.patch = make_universal_patch(uni.side, uni.patch_seed);
}

Image apply_universal(const Image& img, const UniversalTrigger& uni, Rng& rng,
                      PatchPlacement* placed) {
    Image out = img;
    if (uni.side == 0) {
        if (placed) *placed = {0, 0};
        return out;
    }
    check(img.c == 3, "apply_universal: expected 3 channels, got ", img.c);
    check(uni.patch.h == uni.side && uni.patch.w == uni.side,
          "apply_universal: patch pixels not materialized for side ", uni.side);
    check(uni.side <= img.h && uni.side <= img.w, "apply_universal: patch side ", uni.side,
          " exceeds image ", img.h, "x", img.w);
    int py = uni.fixed_y, px = uni.fixed_x;
    if (uni.placement == Placement::random_pos) {
        std::uniform_int_distribution<int> dy(0, img.h - uni.side);
        std::uniform_int_distribution<int> dx(0, img.w - uni.side);
        py = dy(rng);
        px = dx(rng);
    } else {
        check(py >= 0 && px >= 0 && py + uni.side <= img.h && px + uni.side <= img.w,
              "apply_universal: fixed placement (", py, ",", px, ") out of bounds");
    }
    const double a = uni.alpha;
    check(a >= 0.0 && a <= 1.0, "apply_universal: alpha must lie in [0,1], got ", a);
    for (int y = 0; y < uni.side; ++y)
        for (int x = 0; x < uni.side; ++x)
            for (int ch = 0; ch < 3; ++ch)
                out.at(py + y, px + x, ch) =
                    (1.0 - a) * out.at(py + y, px + x, ch) + a * uni.patch.at(y, x, ch);
    clip01(out);
    if (placed) *placed = {py, px};
    return out;
}

Image apply_functional(const Image& img, const FunctionalTrigger& fun) {
    check(img.c == 3, "apply_functional: expected 3 channels, got ", img.c);
    check(fun.block >= 1, "apply_functional: block size must be >= 1, got ", fun.block);
    check(fun.magnitude >= 0.0, "apply_functional: magnitude must be >= 0, got ", fun.magnitude);
    for (int b : fun.bands)
        check(b >= 0 && b < fun.block, "apply_functional: band ", b, " outside block of size ",
              fun.block);
    for (int ch : fun.channels)
        check(ch >= 0 && ch < 3, "apply_functional: channel index ", ch, " out of range");
    if (fun.strict_blocks)
        check(img.h % fun.block == 0 && img.w % fun.block == 0, "apply_functional: image ",
              img.h, "x", img.w, " is not tiled by block size ", fun.block,
              " (strict_blocks set)");

    const double m = fun.magnitude / 255.0;
    Image ycc = rgb_to_ycbcr(img);
    for (int plane : fun.channels) {
        for (int by = 0; by < img.h; by += fun.block) {
            const int sy = std::min(fun.block, img.h - by);
            for (int bx = 0; bx < img.w; bx += fun.block) {
                const int sx = std::min(fun.block, img.w - bx);
                Eigen::MatrixXd blk(sy, sx);
                for (int y = 0; y < sy; ++y)
                    for (int x = 0; x < sx; ++x) blk(y, x) = ycc.at(by + y, bx + x, plane);
                Eigen::MatrixXd coef = block_dct2(blk);
                for (int b : fun.bands)
                    if (b < sy && b < sx) coef(b, b) += m;
                blk = block_idct2(coef);
                for (int y = 0; y < sy; ++y)
                    for (int x = 0; x < sx; ++x) ycc.at(by + y, bx + x, plane) = blk(y, x);
            }
        }
    }
    Image out = ycbcr_to_rgb(ycc);
    clip01(out);
    return out;
}

Image add_residual(const Image& img, const Image& residual) {
    check(img.same_shape(residual), "add_residual: shape mismatch");
    Image out = img;
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += residual.v[i];
    clip01(out);
    return out;
}

DynBatch dynamic_mode_sampler(const std::vector<Image>& images, const std::vector<int>& labels,
                              int target_class, const GeneratorFn& gen, double rho_a,
                              double rho_b, Rng& rng) {
    check(images.size() == labels.size(), "dynamic_mode_sampler: image/label count mismatch");
    check(rho_a >= 0.0 && rho_b >= 0.0 && rho_a + rho_b <= 1.0,
          "dynamic_mode_sampler: need rho_a, rho_b >= 0 with rho_a + rho_b <= 1, got ", rho_a,
          ", ", rho_b);
    const int n = static_cast<int>(images.size());
    DynBatch out;
    out.images.reserve(n);
    out.labels = labels;
    out.modes.assign(n, DynMode::clean);
    out.cross_partner.assign(n, -1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
        const double r = u(rng);
        if (r < rho_a) {
            out.modes[i] = DynMode::backdoor;
            out.images.push_back(add_residual(images[i], gen(images[i])));
            out.labels[i] = target_class;
        } else if (r < rho_a + rho_b && n > 1) {
            out.modes[i] = DynMode::cross;
            std::uniform_int_distribution<int> pick(0, n - 2);
            int j = pick(rng);
            if (j >= i) ++j;
            out.cross_partner[i] = j;
            out.images.push_back(add_residual(images[i], gen(images[j])));
        } else {
            out.images.push_back(images[i]);
        }
    }
    return out;
}

void set_strength(TriggerSpec& spec, double value) {
    check(value >= 0.0 && std::isfinite(value), "set_strength: strength must be finite and >= 0, got ",
          value);
    switch (spec.kind) {
        case TriggerKind::universal:
            spec.uni.side = static_cast<int>(std::lround(value));
            spec.uni.patch = make_universal_patch(spec.uni.side, spec.uni.patch_seed);
            break;
        case TriggerKind::functional:
            spec.fun.magnitude = value;
            break;
        case TriggerKind::dynamic_gen:
            spec.dyn.amplitude = value / 255.0;
            break;
    }
}

double get_strength(const TriggerSpec& spec) {
    switch (spec.kind) {
        case TriggerKind::universal: return spec.uni.side;
        case TriggerKind::functional: return spec.fun.magnitude;
        case TriggerKind::dynamic_gen: return spec.dyn.amplitude * 255.0;
    }
    return 0.0;
}

const char* kind_name(TriggerKind k) {
    switch (k) {
        case TriggerKind::universal: return "universal";
        case TriggerKind::functional: return "functional";
        case TriggerKind::dynamic_gen: return "dynamic";
    }
    return "?";
}

TriggerKind kind_from_name(const std::string& name) {
    if (name == "universal") return TriggerKind::universal;
    if (name == "functional") return TriggerKind::functional;
    if (name == "dynamic") return TriggerKind::dynamic_gen;
    throw error(strf("unknown trigger kind '", name, "' (expected universal|functional|dynamic)"));
}

}  // namespace backlab::trigger
