#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "backlab/trigger.hpp"
#include "doctest.h"

using namespace backlab;

namespace {

// textbook O(n^4) orthonormal DCT-II, written independently of the library
Eigen::MatrixXd naive_dct2(const Eigen::MatrixXd& x) {
    const int r = static_cast<int>(x.rows()), c = static_cast<int>(x.cols());
    auto a = [](int k, int n) { return k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n); };
    Eigen::MatrixXd out(r, c);
    for (int u = 0; u < r; ++u)
        for (int v = 0; v < c; ++v) {
            double s = 0.0;
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    s += x(i, j) * std::cos(M_PI * (2 * i + 1) * u / (2.0 * r)) *
                         std::cos(M_PI * (2 * j + 1) * v / (2.0 * c));
            out(u, v) = a(u, r) * a(v, c) * s;
        }
    return out;
}

Image random_image(int h, int w, int c, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    Image img(h, w, c);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : img.v) v = u(rng);
    return img;
}

Eigen::MatrixXd plane(const Image& img, int ch) {
    Eigen::MatrixXd m(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) m(y, x) = img.at(y, x, ch);
    return m;
}

}  // namespace

TEST_CASE("dct basis is orthonormal") {
    for (int n : {2, 3, 8, 31, 32}) {
        const Eigen::MatrixXd& d = trigger::dct_matrix(n);
        Eigen::MatrixXd eye = d * d.transpose();
        CHECK((eye - Eigen::MatrixXd::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("block_dct2 matches the O(n^4) oracle") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto [r, c] : {std::pair{8, 8}, {16, 32}, {5, 3}, {32, 32}, {1, 7}}) {
        Eigen::MatrixXd x(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) x(i, j) = u(rng);
        Eigen::MatrixXd got = trigger::block_dct2(x);
        Eigen::MatrixXd want = naive_dct2(x);
        CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("dct round trip and Parseval") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    double worst_rt = 0.0, worst_pars = 0.0;
    for (int t = 0; t < 50; ++t) {
        Eigen::MatrixXd x(32, 32);
        for (int i = 0; i < 32; ++i)
            for (int j = 0; j < 32; ++j) x(i, j) = u(rng);
        Eigen::MatrixXd coeffs = trigger::block_dct2(x);
        worst_rt = std::max(worst_rt,
                            (trigger::block_idct2(coeffs) - x).cwiseAbs().maxCoeff());
        worst_pars = std::max(worst_pars, std::fabs(coeffs.norm() - x.norm()));
    }
    CHECK(worst_rt < 1e-9);
    CHECK(worst_pars < 1e-9);
}

TEST_CASE("colorspace matches the BT.601 full-range matrix") {
    // published JFIF/BT.601 full-range coefficients
    auto oracle = [](double r, double g, double b) {
        return std::array<double, 3>{
            0.299 * r + 0.587 * g + 0.114 * b,
            -0.168736 * r - 0.331264 * g + 0.5 * b + 0.5,
            0.5 * r - 0.418688 * g - 0.081312 * b + 0.5};
    };
    Image img = random_image(4, 5, 3, 21);
    Image ycc = trigger::rgb_to_ycbcr(img);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            auto want = oracle(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
            for (int ch = 0; ch < 3; ++ch)
                CHECK(ycc.at(y, x, ch) == doctest::Approx(want[ch]).epsilon(1e-9));
        }
    Image back = trigger::ycbcr_to_rgb(ycc);
    CHECK(max_abs_diff(back, img) < 1e-12);
}

TEST_CASE("functional trigger at magnitude zero is the identity") {
    Image img = random_image(32, 32, 3, 3, 0.2, 0.8);
    trigger::FunctionalTrigger fun;
    fun.magnitude = 0.0;
    Image out = trigger::apply_functional(img, fun);
    CHECK(max_abs_diff(out, img) < 1e-6);
}

TEST_CASE("functional trigger bumps exactly the configured coefficients") {
    Image img = random_image(32, 32, 3, 5, 0.3, 0.7);
    trigger::FunctionalTrigger fun;
    fun.magnitude = 40.0;
    Image out = trigger::apply_functional(img, fun);

    Image ycc_in = trigger::rgb_to_ycbcr(img);
    Image ycc_out = trigger::rgb_to_ycbcr(out);
    const double m = 40.0 / 255.0;
    for (int ch = 0; ch < 3; ++ch) {
        Eigen::MatrixXd delta =
            trigger::block_dct2(plane(ycc_out, ch)) - trigger::block_dct2(plane(ycc_in, ch));
        bool hot = ch == 1 || ch == 2;
        for (int u = 0; u < 32; ++u)
            for (int v = 0; v < 32; ++v) {
                double want = (hot && u == v && (u == 15 || u == 31)) ? m : 0.0;
                CHECK(std::fabs(delta(u, v) - want) < 1e-9);
            }
    }
}

TEST_CASE("functional trigger handles non-tiling images via truncated blocks") {
    Image img = random_image(40, 33, 3, 9, 0.3, 0.7);
    trigger::FunctionalTrigger fun;
    fun.magnitude = 25.0;
    Image out = trigger::apply_functional(img, fun);  // must not throw
    CHECK(out.h == 40);
    CHECK(out.w == 33);
    // band 15 exists in the full 32x32 block; the 8/1-wide edge blocks skip
    // out-of-range bands, so the image still differs from the input
    CHECK(max_abs_diff(out, img) > 1e-4);

    fun.strict_blocks = true;
    CHECK_THROWS_AS(trigger::apply_functional(img, fun), backlab::error);
}

TEST_CASE("universal patch generation is deterministic in the seed") {
    Image a = trigger::make_universal_patch(5, 42);
    Image b = trigger::make_universal_patch(5, 42);
    Image c = trigger::make_universal_patch(5, 43);
    CHECK(max_abs_diff(a, b) == 0.0);
    CHECK(max_abs_diff(a, c) > 0.0);
    CHECK(a.h == 5);
    CHECK(a.w == 5);
    CHECK(a.c == 3);
    for (double v : a.v) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("universal patch replaces pixels at a fixed placement") {
    Image img = random_image(32, 32, 3, 13);
    trigger::UniversalTrigger uni;
    uni.side = 4;
    uni.patch_seed = 9;
    uni.placement = trigger::Placement::fixed;
    uni.fixed_y = 10;
    uni.fixed_x = 20;
    uni.patch = trigger::make_universal_patch(4, 9);
    Rng rng(1);
    trigger::PatchPlacement placed;
    Image out = trigger::apply_universal(img, uni, rng, &placed);
    CHECK(placed.y == 10);
    CHECK(placed.x == 20);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                bool inside = y >= 10 && y < 14 && x >= 20 && x < 24;
                double want = inside ? uni.patch.at(y - 10, x - 20, ch) : img.at(y, x, ch);
                CHECK(out.at(y, x, ch) == doctest::Approx(want).epsilon(1e-12));
            }
}

TEST_CASE("random placement stays in bounds and varies") {
    Image img = random_image(32, 32, 3, 17);
    trigger::UniversalTrigger uni;
    uni.side = 5;
    uni.patch = trigger::make_universal_patch(5, 3);
    Rng rng(77);
    bool moved = false;
    trigger::PatchPlacement first{}, placed{};
    for (int t = 0; t < 50; ++t) {
        trigger::apply_universal(img, uni, rng, &placed);
        CHECK(placed.y >= 0);
        CHECK(placed.x >= 0);
        CHECK(placed.y + 5 <= 32);
        CHECK(placed.x + 5 <= 32);
        if (t == 0) first = placed;
        if (placed.y != first.y || placed.x != first.x) moved = true;
    }
    CHECK(moved);
}

TEST_CASE("side-zero universal trigger is a no-op") {
    Image img = random_image(16, 16, 3, 19);
    trigger::UniversalTrigger uni;
    uni.side = 0;
    Rng rng(1);
    Image out = trigger::apply_universal(img, uni, rng);
    CHECK(max_abs_diff(out, img) == 0.0);
}

TEST_CASE("strength knob maps to the family parameter") {
    trigger::TriggerSpec spec;
    spec.kind = trigger::TriggerKind::universal;
    trigger::set_strength(spec, 7);
    CHECK(spec.uni.side == 7);
    CHECK(trigger::get_strength(spec) == doctest::Approx(7.0));

    spec.kind = trigger::TriggerKind::functional;
    trigger::set_strength(spec, 120.0);
    CHECK(spec.fun.magnitude == doctest::Approx(120.0));
    CHECK(trigger::get_strength(spec) == doctest::Approx(120.0));

    spec.kind = trigger::TriggerKind::dynamic_gen;
    trigger::set_strength(spec, 16.0);
    CHECK(spec.dyn.amplitude == doctest::Approx(16.0 / 255.0));
    CHECK(trigger::get_strength(spec) == doctest::Approx(16.0));
}

TEST_CASE("add_residual clips to the unit range") {
    Image img = random_image(8, 8, 3, 23, 0.8, 1.0);
    Image res(8, 8, 3, 0.5);
    Image out = trigger::add_residual(img, res);
    for (double v : out.v) CHECK(v <= 1.0);
    Image neg(8, 8, 3, -2.0);
    Image out2 = trigger::add_residual(img, neg);
    for (double v : out2.v) CHECK(v >= 0.0);
}

TEST_CASE("dynamic mode sampler draws the configured fractions") {
    const int n = 4000;
    std::vector<Image> images(n, Image(4, 4, 3, 0.5));
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = i % 10;
    trigger::GeneratorFn gen = [](const Image& x) { return Image(x.h, x.w, x.c, 0.1); };
    Rng rng(5);
    auto batch = trigger::dynamic_mode_sampler(images, labels, 3, gen, 0.1, 0.1, rng);
    REQUIRE(batch.images.size() == n);
    int nb = 0, nc = 0, ncl = 0;
    for (int i = 0; i < n; ++i) {
        switch (batch.modes[i]) {
            case trigger::DynMode::backdoor:
                ++nb;
                CHECK(batch.labels[i] == 3);
                CHECK(batch.images[i].at(0, 0, 0) == doctest::Approx(0.6));
                break;
            case trigger::DynMode::cross:
                ++nc;
                CHECK(batch.labels[i] == labels[i]);
                CHECK(batch.cross_partner[i] != i);
                CHECK(batch.cross_partner[i] >= 0);
                break;
            case trigger::DynMode::clean:
                ++ncl;
                CHECK(batch.labels[i] == labels[i]);
                CHECK(batch.images[i].at(0, 0, 0) == doctest::Approx(0.5));
                break;
        }
    }
    CHECK(nb + nc + ncl == n);
    CHECK(nb > n * 0.06);
    CHECK(nb < n * 0.14);
    CHECK(nc > n * 0.06);
    CHECK(nc < n * 0.14);

    Rng rng2(5);
    auto batch2 = trigger::dynamic_mode_sampler(images, labels, 3, gen, 0.1, 0.1, rng2);
    for (int i = 0; i < n; ++i) CHECK(batch.modes[i] == batch2.modes[i]);
}

TEST_CASE("trigger kind names round-trip") {
    for (auto k : {trigger::TriggerKind::universal, trigger::TriggerKind::functional,
                   trigger::TriggerKind::dynamic_gen})
        CHECK(trigger::kind_from_name(trigger::kind_name(k)) == k);
    CHECK_THROWS_AS(trigger::kind_from_name("nope"), backlab::error);
}
