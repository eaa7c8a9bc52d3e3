#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <random>

#include "backlab/backbone.hpp"
#include "doctest.h"

using namespace backlab;
using nn::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double lo = -1.0,
                     double hi = 1.0, double dead_zone = 0.0) {
    Tensor t(std::move(shape));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.data) {
        double x = u(rng);
        while (dead_zone > 0.0 && std::fabs(x) < dead_zone) x = u(rng);
        v = static_cast<float>(x);
    }
    return t;
}

// ||a-f|| against a relative bound plus an absolute floor; the floor absorbs
// finite-difference noise on structurally tiny gradients (e.g. BN beta under a
// downstream BN, whose channel sums are projected out exactly)
bool grads_match(const std::vector<double>& a, const std::vector<double>& f, double tol_rel,
                 double tol_abs) {
    REQUIRE(a.size() == f.size());
    double num = 0.0, na = 0.0, nf = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - f[i]) * (a[i] - f[i]);
        na += a[i] * a[i];
        nf += f[i] * f[i];
    }
    double bound = tol_rel * std::max(std::sqrt(na), std::sqrt(nf)) +
                   tol_abs * std::sqrt(static_cast<double>(a.size()));
    return std::sqrt(num) <= bound;
}

// scalar probe loss: fixed random linear functional of the layer output
struct Probe {
    std::vector<double> w;
    void fit(size_t n, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        w.resize(n);
        for (auto& x : w) x = u(rng);
    }
    double loss(const Tensor& y) const {
        REQUIRE(y.numel() == w.size());
        double s = 0.0;
        for (size_t i = 0; i < w.size(); ++i) s += w[i] * y.data[i];
        return s;
    }
    Tensor grad(const std::vector<int>& shape) const {
        Tensor g(shape);
        for (size_t i = 0; i < w.size(); ++i) g.data[i] = static_cast<float>(w[i]);
        return g;
    }
};

// central difference with the exactly-realized float step
double fd_at(float& slot, double h, const std::function<double()>& eval) {
    const float orig = slot;
    const float up = static_cast<float>(static_cast<double>(orig) + h);
    const float dn = static_cast<float>(static_cast<double>(orig) - h);
    slot = up;
    double lp = eval();
    slot = dn;
    double lm = eval();
    slot = orig;
    return (lp - lm) / (static_cast<double>(up) - static_cast<double>(dn));
}

// checks layer input grads and all parameter grads against central differences
void gradcheck(nn::Layer& layer, Tensor x, std::uint64_t probe_seed, double tol = 1e-3,
               int max_slots = 60) {
    Tensor y0 = layer.forward(x, true);
    Probe probe;
    probe.fit(y0.numel(), probe_seed);

    std::vector<nn::NamedTensor> params;
    layer.collect("p", params);
    for (auto& p : params)
        if (p.grad) p.grad->zero();
    layer.forward(x, true);
    Tensor gx = layer.backward(probe.grad(y0.shape));
    REQUIRE(gx.same_shape(x));

    const double h = 1.0 / 1024.0;
    auto eval_x = [&] { return probe.loss(layer.forward(x, true)); };

    std::mt19937_64 pick(probe_seed ^ 0x9e3779b97f4a7c15ull);
    auto sample = [&](size_t n) {
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        if (static_cast<int>(n) > max_slots) {
            std::shuffle(idx.begin(), idx.end(), pick);
            idx.resize(max_slots);
        }
        return idx;
    };

    std::vector<double> want, got;
    for (size_t i : sample(x.numel())) {
        want.push_back(fd_at(x.data[i], h, eval_x));
        got.push_back(gx.data[i]);
    }
    CHECK(grads_match(got, want, tol, 2e-3));

    for (auto& p : params) {
        if (!p.grad) continue;
        std::vector<double> pw, pg;
        for (size_t i : sample(p.value->numel())) {
            pw.push_back(fd_at(p.value->data[i], h, eval_x));
            pg.push_back(p.grad->data[i]);
        }
        INFO("param ", p.name);
        CHECK(grads_match(pg, pw, tol, 2e-3));
    }
}

}  // namespace

TEST_CASE("conv2d matches finite differences") {
    Rng rng(3);
    nn::Conv2d conv(3, 4, 3, 1, 1, rng, 1, true);
    gradcheck(conv, random_tensor({2, 3, 6, 6}, 5), 7);

    nn::Conv2d strided(3, 5, 3, 2, 0, rng, 1, false);
    gradcheck(strided, random_tensor({2, 3, 7, 7}, 9), 11);

    nn::Conv2d depthwise(4, 4, 3, 1, 1, rng, 4, true);
    gradcheck(depthwise, random_tensor({2, 4, 5, 5}, 13), 15);

    nn::Conv2d one_by_one(6, 3, 1, 1, 0, rng, 1, false);
    gradcheck(one_by_one, random_tensor({3, 6, 4, 4}, 17), 19);
}

TEST_CASE("conv2d forward matches a hand-computed case") {
    Rng rng(1);
    nn::Conv2d conv(1, 1, 3, 1, 1, rng, 1, false);
    conv.W.data.assign(9, 1.0f);  // box filter
    Tensor x({1, 1, 3, 3});
    for (int i = 0; i < 9; ++i) x.data[i] = static_cast<float>(i + 1);
    Tensor y = conv.forward(x, false);
    // center output = sum 1..9 = 45; corner (0,0) covers {1,2,4,5} = 12
    CHECK(y.data[4] == doctest::Approx(45.0));
    CHECK(y.data[0] == doctest::Approx(12.0));
    CHECK(y.data[8] == doctest::Approx(5 + 6 + 8 + 9));
}

TEST_CASE("batchnorm matches finite differences and tracks running stats") {
    nn::BatchNorm2d bn(3);
    // non-trivial affine parameters
    for (int i = 0; i < 3; ++i) {
        bn.gamma.data[i] = 0.5f + 0.3f * i;
        bn.beta.data[i] = -0.2f + 0.1f * i;
    }
    gradcheck(bn, random_tensor({4, 3, 5, 5}, 21), 23, 2e-3);

    nn::BatchNorm2d bn2(2);
    Tensor x = random_tensor({3, 2, 4, 4}, 25);
    bn2.forward(x, true);
    // running = (1-momentum)*old + momentum*batch
    for (int c = 0; c < 2; ++c) {
        double mean = 0.0;
        int n = 0;
        for (int ni = 0; ni < 3; ++ni)
            for (int i = 0; i < 16; ++i) {
                mean += x.data[(ni * 2 + c) * 16 + i];
                ++n;
            }
        mean /= n;
        CHECK(bn2.running_mean.data[c] == doctest::Approx(0.1 * mean).epsilon(1e-4));
    }

    // eval mode normalizes with running stats
    nn::BatchNorm2d bn3(1);
    bn3.running_mean.data[0] = 2.0f;
    bn3.running_var.data[0] = 4.0f;
    bn3.gamma.data[0] = 3.0f;
    bn3.beta.data[0] = 1.0f;
    Tensor xe({1, 1, 1, 1});
    xe.data[0] = 4.0f;
    Tensor ye = bn3.forward(xe, false);
    CHECK(ye.data[0] == doctest::Approx(3.0 * (4.0 - 2.0) / std::sqrt(4.0 + 1e-5) + 1.0)
                            .epsilon(1e-5));
}

TEST_CASE("linear, relu, tanh, pool, upsample match finite differences") {
    Rng rng(5);
    nn::Linear lin(6, 4, rng);
    gradcheck(lin, random_tensor({5, 6}, 27), 29);

    nn::ReLU relu;
    gradcheck(relu, random_tensor({3, 7}, 31, -1.0, 1.0, 0.05), 33);

    nn::Tanh tanh_l;
    gradcheck(tanh_l, random_tensor({3, 7}, 35), 37);

    nn::GlobalAvgPool gap;
    gradcheck(gap, random_tensor({2, 3, 4, 4}, 39), 41);

    nn::Upsample2x up;
    gradcheck(up, random_tensor({2, 3, 3, 3}, 43), 45);
}

TEST_CASE("upsample2x repeats pixels in a 2x2 pattern") {
    Tensor x({1, 1, 2, 2});
    x.data = {1.0f, 2.0f, 3.0f, 4.0f};
    nn::Upsample2x up;
    Tensor y = up.forward(x, false);
    REQUIRE(y.shape == std::vector<int>{1, 1, 4, 4});
    std::vector<float> want = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    for (int i = 0; i < 16; ++i) CHECK(y.data[i] == want[i]);
}

TEST_CASE("composite stacks match finite differences") {
    Rng rng(7);
    auto seq = std::make_unique<nn::Sequential>();
    seq->add(std::make_unique<nn::Conv2d>(3, 4, 3, 1, 1, rng));
    seq->add(std::make_unique<nn::BatchNorm2d>(4));
    seq->add(std::make_unique<nn::ReLU>());
    seq->add(std::make_unique<nn::GlobalAvgPool>());
    seq->add(std::make_unique<nn::Linear>(4, 3, rng));
    gradcheck(*seq, random_tensor({2, 3, 6, 6}, 47), 49, 2e-3);

    nn::BasicBlock block(3, 6, 2, rng);  // strided, exercises the shortcut
    gradcheck(block, random_tensor({2, 3, 6, 6}, 51), 53, 2e-3);

    nn::InvertedResidual ir(4, 4, 1, 2, rng);  // residual path active
    gradcheck(ir, random_tensor({2, 4, 5, 5}, 55), 57, 2e-3);

    nn::ShuffleUnit su(4, 8, 2, rng);
    gradcheck(su, random_tensor({2, 4, 6, 6}, 59), 61, 2e-3);
}

TEST_CASE("sgd follows the momentum/weight-decay recurrence") {
    Tensor w({2});
    w.data = {1.0f, -2.0f};
    Tensor g({2});
    g.data = {0.5f, 0.25f};
    std::vector<nn::NamedTensor> params{{"w", &w, &g, true}};
    nn::SGD opt;
    opt.momentum = 0.9;
    opt.weight_decay = 0.01;
    opt.attach(params);

    // manual recurrence: v = mu*v + g + wd*w; w -= lr*v
    double vw[2] = {0.0, 0.0}, ww[2] = {1.0, -2.0};
    for (int step = 0; step < 3; ++step) {
        for (int i = 0; i < 2; ++i) {
            vw[i] = 0.9 * vw[i] + g.data[i] + 0.01 * ww[i];
            ww[i] -= 0.1 * vw[i];
        }
        //ate the fact that the implementation reads the pre-update weight
        opt.step(0.1);
        for (int i = 0; i < 2; ++i) CHECK(w.data[i] == doctest::Approx(ww[i]).epsilon(1e-5));
    }

    // decay=false entries skip weight decay
    Tensor w2({1});
    w2.data = {4.0f};
    Tensor g2({1});
    g2.data = {1.0f};
    std::vector<nn::NamedTensor> p2{{"b", &w2, &g2, false}};
    nn::SGD opt2;
    opt2.momentum = 0.0;
    opt2.weight_decay = 0.5;
    opt2.attach(p2);
    opt2.step(1.0);
    CHECK(w2.data[0] == doctest::Approx(3.0));

    // buffers (grad == nullptr) are not optimized
    Tensor buf({1});
    std::vector<nn::NamedTensor> p3{{"buf", &buf, nullptr, false}};
    nn::SGD opt3;
    opt3.attach(p3);
    CHECK(opt3.params.empty());
}

TEST_CASE("cosine schedule hits its endpoints") {
    CHECK(nn::cosine_lr(0.4, 0, 100) == doctest::Approx(0.4));
    CHECK(nn::cosine_lr(0.4, 100, 100) == doctest::Approx(0.0));
    CHECK(nn::cosine_lr(0.4, 50, 100) == doctest::Approx(0.2));
    for (int e = 1; e <= 100; ++e)
        CHECK(nn::cosine_lr(0.4, e, 100) < nn::cosine_lr(0.4, e - 1, 100));
    CHECK_THROWS_AS(nn::cosine_lr(0.1, 0, 0), backlab::error);
}

TEST_CASE("ema blends tensors with the configured decay") {
    Tensor d({3}), s({3});
    d.data = {1.0f, 2.0f, 3.0f};
    s.data = {2.0f, 0.0f, -1.0f};
    std::vector<nn::NamedTensor> dst{{"t", &d, nullptr, false}};
    std::vector<nn::NamedTensor> src{{"t", &s, nullptr, false}};
    nn::ema_update(dst, src, 0.9);
    CHECK(d.data[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 2.0));
    CHECK(d.data[1] == doctest::Approx(1.8));
    CHECK(d.data[2] == doctest::Approx(0.9 * 3.0 - 0.1));

    nn::copy_tensors(dst, src);
    for (int i = 0; i < 3; ++i) CHECK(d.data[i] == s.data[i]);
}

TEST_CASE("encoder clone is bitwise identical and independent") {
    nn::EncoderConfig cfg;
    cfg.backbone.width_mult = 0.125;
    cfg.proj_dim = 16;
    nn::EncoderModel enc = nn::build_encoder(cfg);
    nn::EncoderModel dup = enc.clone();
    std::vector<nn::NamedTensor> a, b;
    enc.collect(a);
    dup.collect(b);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(a[i].value->data == b[i].value->data);
    }
    // mutating the clone leaves the original alone
    b[0].value->data[0] += 1.0f;
    CHECK(a[0].value->data[0] != b[0].value->data[0]);

    // same seed rebuild is identical too
    nn::EncoderModel enc2 = nn::build_encoder(cfg);
    std::vector<nn::NamedTensor> c;
    enc2.collect(c);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].value->data == c[i].value->data);
}

TEST_CASE("all backbone families run forward and backward") {
    for (auto fam : {nn::BackboneFamily::resnet18, nn::BackboneFamily::resnet50,
                     nn::BackboneFamily::mobilenet, nn::BackboneFamily::shufflenet}) {
        nn::BackboneConfig bc;
        bc.family = fam;
        bc.width_mult = 0.125;
        nn::Backbone bb = nn::build_backbone(bc);
        Tensor x = random_tensor({2, 3, 32, 32}, 63);
        Tensor f = bb.features(x, true);
        REQUIRE(f.rank() == 2);
        CHECK(f.dim(0) == 2);
        CHECK(f.dim(1) == bb.feature_dim());
        Tensor gf(f.shape, 0.01f);
        Tensor gx = bb.backward_features(gf);
        CHECK(gx.same_shape(x));
        CHECK(nn::family_from_name(nn::family_name(fam)) == fam);
    }
}

TEST_CASE("checkpoints round-trip bitwise") {
    namespace fs = std::filesystem;
    nn::EncoderConfig cfg;
    cfg.backbone.width_mult = 0.125;
    cfg.proj_dim = 8;
    nn::EncoderModel enc = nn::build_encoder(cfg);
    std::vector<nn::NamedTensor> tensors;
    enc.collect(tensors);
    // make buffers non-trivial
    for (auto& t : tensors)
        if (!t.grad)
            for (auto& v : t.value->data) v += 0.125f;

    fs::path p = fs::temp_directory_path() / "backlab_nn_ckpt.bin";
    nn::save_checkpoint(p.string(), "{\"kind\":\"encoder\"}", tensors);

    nn::EncoderModel fresh = nn::build_encoder(cfg);
    std::vector<nn::NamedTensor> into;
    fresh.collect(into);
    std::string cfg_json = nn::load_checkpoint(p.string(), into);
    CHECK(cfg_json == "{\"kind\":\"encoder\"}");
    CHECK(nn::checkpoint_config(p.string()) == "{\"kind\":\"encoder\"}");
    for (size_t i = 0; i < tensors.size(); ++i)
        CHECK(tensors[i].value->data == into[i].value->data);

    CHECK_THROWS_AS(nn::load_checkpoint((fs::temp_directory_path() / "missing.bin").string(),
                                        into),
                    backlab::error);
    fs::remove(p);
}

TEST_CASE("image/tensor conversion is the NCHW transpose") {
    Image img(2, 3, 3);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 3; ++x)
            for (int c = 0; c < 3; ++c)
                img.v[static_cast<size_t>((y * 3 + x) * 3 + c)] = y * 100 + x * 10 + c;
    Tensor t = nn::images_to_tensor(std::vector<Image>{img});
    REQUIRE(t.shape == std::vector<int>{1, 3, 2, 3});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 3; ++x)
                CHECK(t.data[static_cast<size_t>((c * 2 + y) * 3 + x)] ==
                      doctest::Approx(y * 100 + x * 10 + c));
    Image back = nn::tensor_to_image(t, 0);
    CHECK(max_abs_diff(back, img) < 1e-6);
}

TEST_CASE("conv channel zeroing silences the channel") {
    Rng rng(9);
    nn::Conv2d conv(2, 3, 3, 1, 1, rng, 1, true);
    conv.zero_out_channel(1);
    Tensor x = random_tensor({1, 2, 4, 4}, 65);
    Tensor y = conv.forward(x, false);
    for (int i = 0; i < 16; ++i) CHECK(y.data[16 + i] == 0.0f);

    nn::BatchNorm2d bn(3);
    bn.zero_channel(2);
    CHECK(bn.gamma.data[2] == 0.0f);
    CHECK(bn.beta.data[2] == 0.0f);
}

TEST_CASE("generator residual is bounded by its amplitude") {
    nn::GeneratorConfig gc;
    gc.base_channels = 4;
    gc.amplitude = 16.0 / 255.0;
    nn::GeneratorNet gen = nn::build_generator(gc);
    Tensor x = random_tensor({2, 3, 16, 16}, 67, 0.0, 1.0);
    Tensor r = gen.residual(x, false);
    REQUIRE(r.same_shape(x));
    for (float v : r.data) CHECK(std::fabs(v) <= gc.amplitude + 1e-6);

    Image img(16, 16, 3, 0.5);
    Image res = gen.residual_image(img);
    CHECK(res.h == 16);
    double mx = 0.0;
    for (double v : res.v) mx = std::max(mx, std::fabs(v));
    CHECK(mx <= gc.amplitude + 1e-6);
}
