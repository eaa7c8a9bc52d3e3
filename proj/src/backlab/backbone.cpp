#include "backlab/backbone.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace backlab::nn {

const char* family_name(BackboneFamily f) {
    switch (f) {
        case BackboneFamily::resnet18: return "resnet18";
        case BackboneFamily::resnet50: return "resnet50";
        case BackboneFamily::mobilenet: return "mobilenet";
        case BackboneFamily::shufflenet: return "shufflenet";
    }
    return "?";
}

BackboneFamily family_from_name(const std::string& s) {
    if (s == "resnet18") return BackboneFamily::resnet18;
    if (s == "resnet50") return BackboneFamily::resnet50;
    if (s == "mobilenet") return BackboneFamily::mobilenet;
    if (s == "shufflenet") return BackboneFamily::shufflenet;
    throw error(strf("unknown backbone family '", s,
                     "' (expected resnet18|resnet50|mobilenet|shufflenet)"));
}

namespace {

int scaled(int w, double mult) {
    const int v = static_cast<int>(std::lround(w * mult / 2.0)) * 2;
    return std::max(4, v);
}

Tensor add_tensors(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "residual add: shape mismatch ", a.shape_str(), " vs ", b.shape_str());
    Tensor y = a;
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += b.data[i];
    return y;
}

// channel slice [c0, c1) of an NCHW tensor
Tensor slice_channels(const Tensor& x, int c0, int c1) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y({N, c1 - c0, H, W});
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int n = 0; n < N; ++n)
        std::memcpy(y.data.data() + static_cast<std::size_t>(n) * (c1 - c0) * plane,
                    x.data.data() + (static_cast<std::size_t>(n) * C + c0) * plane,
                    (c1 - c0) * plane * sizeof(float));
    return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    check(b.dim(0) == N && b.dim(2) == H && b.dim(3) == W, "concat: shape mismatch");
    Tensor y({N, Ca + Cb, H, W});
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        std::memcpy(y.data.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane,
                    a.data.data() + static_cast<std::size_t>(n) * Ca * plane,
                    Ca * plane * sizeof(float));
        std::memcpy(y.data.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane,
                    b.data.data() + static_cast<std::size_t>(n) * Cb * plane,
                    Cb * plane * sizeof(float));
    }
    return y;
}

// 2-group channel shuffle: out[j] = in[(j % 2) * C/2 + j / 2]
Tensor shuffle2(const Tensor& x, bool inverse) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(C % 2 == 0, "channel shuffle: odd channel count ", C);
    Tensor y(x.shape);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int j = 0; j < C; ++j) {
        const int src = (j % 2) * (C / 2) + j / 2;
        const int from = inverse ? j : src;
        const int to = inverse ? src : j;
        for (int n = 0; n < N; ++n)
            std::memcpy(y.data.data() + (static_cast<std::size_t>(n) * C + to) * plane,
                        x.data.data() + (static_cast<std::size_t>(n) * C + from) * plane,
                        plane * sizeof(float));
    }
    return y;
}

}  // namespace

// ---- BasicBlock ---------------------------------------------------------------

BasicBlock::BasicBlock(int cin, int cout, int stride, Rng& rng)
    : conv1(cin, cout, 3, stride, 1, rng),
      conv2(cout, cout, 3, 1, 1, rng),
      bn1(cout),
      bn2(cout) {
    if (stride != 1 || cin != cout) {
        sc_conv = std::make_unique<Conv2d>(cin, cout, 1, stride, 0, rng);
        sc_bn = std::make_unique<BatchNorm2d>(cout);
    }
}

Tensor BasicBlock::forward(const Tensor& x, bool train) {
    Tensor h = relu1.forward(bn1.forward(conv1.forward(x, train), train), train);
    h = bn2.forward(conv2.forward(h, train), train);
    Tensor sc = sc_conv ? sc_bn->forward(sc_conv->forward(x, train), train) : x;
    return relu2.forward(add_tensors(h, sc), train);
}

Tensor BasicBlock::backward(const Tensor& gy) {
    Tensor g = relu2.backward(gy);
    Tensor gmain = conv1.backward(
        bn1.backward(relu1.backward(conv2.backward(bn2.backward(g)))));
    Tensor gsc = sc_conv ? sc_conv->backward(sc_bn->backward(g)) : g;
    return add_tensors(gmain, gsc);
}

void BasicBlock::collect(const std::string& p, std::vector<NamedTensor>& out) {
    conv1.collect(p + ".conv1", out);
    bn1.collect(p + ".bn1", out);
    conv2.collect(p + ".conv2", out);
    bn2.collect(p + ".bn2", out);
    if (sc_conv) {
        sc_conv->collect(p + ".sc_conv", out);
        sc_bn->collect(p + ".sc_bn", out);
    }
}

void BasicBlock::visit(const std::function<void(Layer*)>& fn) {
    conv1.visit(fn);
    bn1.visit(fn);
    relu1.visit(fn);
    conv2.visit(fn);
    bn2.visit(fn);
    if (sc_conv) {
        sc_conv->visit(fn);
        sc_bn->visit(fn);
    }
    relu2.visit(fn);
}

// ---- Bottleneck -----------------------------------------------------------------

Bottleneck::Bottleneck(int cin, int mid, int cout, int stride, Rng& rng)
    : conv1(cin, mid, 1, 1, 0, rng),
      conv2(mid, mid, 3, stride, 1, rng),
      conv3(mid, cout, 1, 1, 0, rng),
      bn1(mid),
      bn2(mid),
      bn3(cout) {
    if (stride != 1 || cin != cout) {
        sc_conv = std::make_unique<Conv2d>(cin, cout, 1, stride, 0, rng);
        sc_bn = std::make_unique<BatchNorm2d>(cout);
    }
}

Tensor Bottleneck::forward(const Tensor& x, bool train) {
    Tensor h = relu1.forward(bn1.forward(conv1.forward(x, train), train), train);
    h = relu2.forward(bn2.forward(conv2.forward(h, train), train), train);
    h = bn3.forward(conv3.forward(h, train), train);
    Tensor sc = sc_conv ? sc_bn->forward(sc_conv->forward(x, train), train) : x;
    return relu3.forward(add_tensors(h, sc), train);
}

Tensor Bottleneck::backward(const Tensor& gy) {
    Tensor g = relu3.backward(gy);
    Tensor gmain = bn3.backward(g);
    gmain = conv3.backward(gmain);
    gmain = relu2.backward(gmain);
    gmain = conv2.backward(bn2.backward(gmain));
    gmain = relu1.backward(gmain);
    gmain = conv1.backward(bn1.backward(gmain));
    Tensor gsc = sc_conv ? sc_conv->backward(sc_bn->backward(g)) : g;
    return add_tensors(gmain, gsc);
}

void Bottleneck::collect(const std::string& p, std::vector<NamedTensor>& out) {
    conv1.collect(p + ".conv1", out);
    bn1.collect(p + ".bn1", out);
    conv2.collect(p + ".conv2", out);
    bn2.collect(p + ".bn2", out);
    conv3.collect(p + ".conv3", out);
    bn3.collect(p + ".bn3", out);
    if (sc_conv) {
        sc_conv->collect(p + ".sc_conv", out);
        sc_bn->collect(p + ".sc_bn", out);
    }
}

void Bottleneck::visit(const std::function<void(Layer*)>& fn) {
    conv1.visit(fn);
    bn1.visit(fn);
    relu1.visit(fn);
    conv2.visit(fn);
    bn2.visit(fn);
    relu2.visit(fn);
    conv3.visit(fn);
    bn3.visit(fn);
    if (sc_conv) {
        sc_conv->visit(fn);
        sc_bn->visit(fn);
    }
    relu3.visit(fn);
}

// ---- InvertedResidual --------------------------------------------------------------

InvertedResidual::InvertedResidual(int cin, int cout, int stride, int expand_ratio, Rng& rng)
    : expand(cin, cin * expand_ratio, 1, 1, 0, rng),
      dw(cin * expand_ratio, cin * expand_ratio, 3, stride, 1, rng, cin * expand_ratio),
      project(cin * expand_ratio, cout, 1, 1, 0, rng),
      bn1(cin * expand_ratio),
      bn2(cin * expand_ratio),
      bn3(cout),
      use_res(stride == 1 && cin == cout) {}

Tensor InvertedResidual::forward(const Tensor& x, bool train) {
    Tensor h = relu1.forward(bn1.forward(expand.forward(x, train), train), train);
    h = relu2.forward(bn2.forward(dw.forward(h, train), train), train);
    h = bn3.forward(project.forward(h, train), train);
    return use_res ? add_tensors(h, x) : h;
}

Tensor InvertedResidual::backward(const Tensor& gy) {
    Tensor g = bn3.backward(gy);
    g = project.backward(g);
    g = relu2.backward(g);
    g = dw.backward(bn2.backward(g));
    g = relu1.backward(g);
    g = expand.backward(bn1.backward(g));
    return use_res ? add_tensors(g, gy) : g;
}

void InvertedResidual::collect(const std::string& p, std::vector<NamedTensor>& out) {
    expand.collect(p + ".expand", out);
    bn1.collect(p + ".bn1", out);
    dw.collect(p + ".dw", out);
    bn2.collect(p + ".bn2", out);
    project.collect(p + ".project", out);
    bn3.collect(p + ".bn3", out);
}

void InvertedResidual::visit(const std::function<void(Layer*)>& fn) {
    expand.visit(fn);
    bn1.visit(fn);
    relu1.visit(fn);
    dw.visit(fn);
    bn2.visit(fn);
    relu2.visit(fn);
    project.visit(fn);
    bn3.visit(fn);
}

// ---- ShuffleUnit ---------------------------------------------------------------------

ShuffleUnit::ShuffleUnit(int cin_, int cout_, int stride_, Rng& rng)
    : cin(cin_),
      cout(cout_),
      stride(stride_),
      r1(stride_ == 1 ? cin_ / 2 : cin_, cout_ / 2, 1, 1, 0, rng),
      rdw(cout_ / 2, cout_ / 2, 3, stride_, 1, rng, cout_ / 2),
      r2(cout_ / 2, cout_ / 2, 1, 1, 0, rng),
      rbn1(cout_ / 2),
      rbn2(cout_ / 2),
      rbn3(cout_ / 2) {
    check(cout % 2 == 0, "shuffle unit: output channels must be even, got ", cout);
    if (stride == 1)
        check(cin == cout, "shuffle unit: stride-1 units keep width (cin ", cin, " != cout ",
              cout, ")");
    if (stride != 1) {
        ldw = std::make_unique<Conv2d>(cin, cin, 3, stride, 1, rng, cin);
        lbn1 = std::make_unique<BatchNorm2d>(cin);
        l1 = std::make_unique<Conv2d>(cin, cout / 2, 1, 1, 0, rng);
        lbn2 = std::make_unique<BatchNorm2d>(cout / 2);
        lrelu = std::make_unique<ReLU>();
    }
}

Tensor ShuffleUnit::forward(const Tensor& x, bool train) {
    cached_in_shape = x.shape;
    Tensor left, right_in;
    if (stride == 1) {
        left = slice_channels(x, 0, cin / 2);
        right_in = slice_channels(x, cin / 2, cin);
    } else {
        left = lrelu->forward(
            lbn2->forward(l1->forward(lbn1->forward(ldw->forward(x, train), train), train),
                          train),
            train);
        right_in = x;
    }
    Tensor r = rrelu1.forward(rbn1.forward(r1.forward(right_in, train), train), train);
    r = rbn2.forward(rdw.forward(r, train), train);
    r = rrelu2.forward(rbn3.forward(r2.forward(r, train), train), train);
    return shuffle2(concat_channels(left, r), false);
}

Tensor ShuffleUnit::backward(const Tensor& gy) {
    Tensor g = shuffle2(gy, true);
    const int half = cout / 2;
    Tensor gleft = slice_channels(g, 0, half);
    Tensor gright = slice_channels(g, half, cout);

    gright = rrelu2.backward(gright);
    gright = r2.backward(rbn3.backward(gright));
    gright = rbn2.backward(gright);
    gright = rdw.backward(gright);
    gright = rrelu1.backward(gright);
    gright = r1.backward(rbn1.backward(gright));

    if (stride == 1) {
        Tensor gx(cached_in_shape);
        const int N = gx.dim(0), H = gx.dim(2), W = gx.dim(3);
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        for (int n = 0; n < N; ++n) {
            std::memcpy(gx.data.data() + static_cast<std::size_t>(n) * cin * plane,
                        gleft.data.data() + static_cast<std::size_t>(n) * (cin / 2) * plane,
                        (cin / 2) * plane * sizeof(float));
            std::memcpy(gx.data.data() + (static_cast<std::size_t>(n) * cin + cin / 2) * plane,
                        gright.data.data() + static_cast<std::size_t>(n) * (cin / 2) * plane,
                        (cin / 2) * plane * sizeof(float));
        }
        return gx;
    }
    Tensor gl = lrelu->backward(gleft);
    gl = l1->backward(lbn2->backward(gl));
    gl = ldw->backward(lbn1->backward(gl));
    return add_tensors(gl, gright);
}

void ShuffleUnit::collect(const std::string& p, std::vector<NamedTensor>& out) {
    r1.collect(p + ".r1", out);
    rbn1.collect(p + ".rbn1", out);
    rdw.collect(p + ".rdw", out);
    rbn2.collect(p + ".rbn2", out);
    r2.collect(p + ".r2", out);
    rbn3.collect(p + ".rbn3", out);
    if (ldw) {
        ldw->collect(p + ".ldw", out);
        lbn1->collect(p + ".lbn1", out);
        l1->collect(p + ".l1", out);
        lbn2->collect(p + ".lbn2", out);
    }
}

void ShuffleUnit::visit(const std::function<void(Layer*)>& fn) {
    if (ldw) {
        ldw->visit(fn);
        lbn1->visit(fn);
        l1->visit(fn);
        lbn2->visit(fn);
        lrelu->visit(fn);
    }
    r1.visit(fn);
    rbn1.visit(fn);
    rrelu1.visit(fn);
    rdw.visit(fn);
    rbn2.visit(fn);
    r2.visit(fn);
    rbn3.visit(fn);
    rrelu2.visit(fn);
}

// ---- Backbone ------------------------------------------------------------------------

Tensor Backbone::features(const Tensor& x, bool train) {
    Tensor h = stem.forward(x, train);
    for (std::size_t l = 0; l < stages.size(); ++l) {
        for (std::size_t u = 0; u < stages[l].size(); ++u) {
            h = stages[l][u]->forward(h, train);
            if (trunc_stage == static_cast<int>(l) + 1 && trunc_unit == static_cast<int>(u) + 1)
                return pool.forward(h, train);
        }
    }
    return pool.forward(h, train);
}

Tensor Backbone::backward_features(const Tensor& gfeat) {
    Tensor g = pool.backward(gfeat);
    const int ls = trunc_stage > 0 ? trunc_stage : static_cast<int>(stages.size());
    for (int l = ls; l >= 1; --l) {
        const auto& stage = stages[static_cast<std::size_t>(l - 1)];
        int us = static_cast<int>(stage.size());
        if (trunc_stage == l && trunc_unit > 0) us = trunc_unit;
        for (int u = us; u >= 1; --u) g = stage[static_cast<std::size_t>(u - 1)]->backward(g);
    }
    return stem.backward(g);
}

void Backbone::collect(std::vector<NamedTensor>& out) {
    stem.collect("stem", out);
    for (std::size_t l = 0; l < stages.size(); ++l)
        for (std::size_t u = 0; u < stages[l].size(); ++u)
            stages[l][u]->collect(strf("s", l + 1, ".u", u + 1), out);
}

void Backbone::visit(const std::function<void(Layer*)>& fn) {
    stem.visit(fn);
    for (auto& st : stages)
        for (auto& u : st) u->visit(fn);
}

int Backbone::feature_dim() const {
    if (trunc_stage == 0) return full_feature_dim;
    return unit_out_dims[static_cast<std::size_t>(trunc_stage - 1)]
                        [static_cast<std::size_t>(trunc_unit - 1)];
}

void Backbone::set_truncation(int l, int k) {
    if (l == 0 && k == 0) {
        trunc_stage = trunc_unit = 0;
        return;
    }
    check(l >= 1 && l <= static_cast<int>(stages.size()), "set_truncation: stage ", l,
          " does not exist (backbone has ", stages.size(), " stages)");
    const int units = static_cast<int>(stages[static_cast<std::size_t>(l - 1)].size());
    check(k >= 1 && k <= units, "set_truncation: unit ", k, " does not exist in stage ", l,
          " (which has ", units, " units)");
    trunc_stage = l;
    trunc_unit = k;
}

Backbone build_backbone(const BackboneConfig& cfg) {
    check(cfg.width_mult > 0, "backbone: width_mult must be positive");
    check(cfg.stem_stride == 1 || cfg.stem_stride == 2, "backbone: stem_stride must be 1 or 2");
    Backbone b;
    b.cfg = cfg;
    Rng rng(cfg.init_seed);
    const double m = cfg.width_mult;

    auto stem_to = [&](int c) {
        b.stem.add(std::make_unique<Conv2d>(3, c, 3, cfg.stem_stride, 1, rng));
        b.stem.add(std::make_unique<BatchNorm2d>(c));
        b.stem.add(std::make_unique<ReLU>());
    };

    switch (cfg.family) {
        case BackboneFamily::resnet18: {
            const int w[4] = {scaled(64, m), scaled(128, m), scaled(256, m), scaled(512, m)};
            stem_to(w[0]);
            int cin = w[0];
            for (int l = 0; l < 4; ++l) {
                b.stages.emplace_back();
                b.unit_out_dims.emplace_back();
                for (int u = 0; u < 2; ++u) {
                    const int stride = (u == 0 && l > 0) ? 2 : 1;
                    b.stages.back().push_back(
                        std::make_unique<BasicBlock>(cin, w[l], stride, rng));
                    b.unit_out_dims.back().push_back(w[l]);
                    cin = w[l];
                }
            }
            b.full_feature_dim = w[3];
            break;
        }
        case BackboneFamily::resnet50: {
            const int mid[4] = {scaled(64, m), scaled(128, m), scaled(256, m), scaled(512, m)};
            const int units[4] = {3, 4, 6, 3};
            stem_to(mid[0]);
            int cin = mid[0];
            for (int l = 0; l < 4; ++l) {
                b.stages.emplace_back();
                b.unit_out_dims.emplace_back();
                const int cout = 4 * mid[l];
                for (int u = 0; u < units[l]; ++u) {
                    const int stride = (u == 0 && l > 0) ? 2 : 1;
                    b.stages.back().push_back(
                        std::make_unique<Bottleneck>(cin, mid[l], cout, stride, rng));
                    b.unit_out_dims.back().push_back(cout);
                    cin = cout;
                }
            }
            b.full_feature_dim = 4 * mid[3];
            break;
        }
        case BackboneFamily::mobilenet: {
            const int w[4] = {scaled(32, m), scaled(64, m), scaled(128, m), scaled(256, m)};
            const int units[4] = {1, 2, 2, 2};
            stem_to(w[0]);
            int cin = w[0];
            for (int l = 0; l < 4; ++l) {
                b.stages.emplace_back();
                b.unit_out_dims.emplace_back();
                for (int u = 0; u < units[l]; ++u) {
                    const int stride = (u == 0 && l > 0) ? 2 : 1;
                    b.stages.back().push_back(
                        std::make_unique<InvertedResidual>(cin, w[l], stride, 4, rng));
                    b.unit_out_dims.back().push_back(w[l]);
                    cin = w[l];
                }
            }
            b.full_feature_dim = w[3];
            break;
        }
        case BackboneFamily::shufflenet: {
            const int w[4] = {scaled(32, m), scaled(64, m), scaled(128, m), scaled(256, m)};
            const int units[4] = {2, 2, 2, 2};
            stem_to(w[0]);
            int cin = w[0];
            for (int l = 0; l < 4; ++l) {
                b.stages.emplace_back();
                b.unit_out_dims.emplace_back();
                for (int u = 0; u < units[l]; ++u) {
                    const int stride = (u == 0 && l > 0) ? 2 : 1;
                    b.stages.back().push_back(
                        std::make_unique<ShuffleUnit>(cin, w[l], stride, rng));
                    b.unit_out_dims.back().push_back(w[l]);
                    cin = w[l];
                }
            }
            b.full_feature_dim = w[3];
            break;
        }
    }
    return b;
}

// ---- EncoderModel ----------------------------------------------------------------------

void EncoderModel::collect(std::vector<NamedTensor>& out) {
    backbone.collect(out);
    projector.collect("proj", out);
}

EncoderModel build_encoder(const EncoderConfig& cfg) {
    EncoderModel e;
    e.cfg = cfg;
    e.backbone = build_backbone(cfg.backbone);
    const int feat = e.backbone.feature_dim();
    const int hidden = cfg.proj_hidden > 0 ? cfg.proj_hidden : feat;
    Rng rng(derive_seed(cfg.backbone.init_seed, "projector"));
    e.projector.add(std::make_unique<Linear>(feat, hidden, rng));
    e.projector.add(std::make_unique<ReLU>());
    e.projector.add(std::make_unique<Linear>(hidden, cfg.proj_dim, rng));
    return e;
}

EncoderModel EncoderModel::clone() const {
    EncoderModel copy = build_encoder(cfg);
    copy.backbone.trunc_stage = backbone.trunc_stage;
    copy.backbone.trunc_unit = backbone.trunc_unit;
    std::vector<NamedTensor> src, dst;
    const_cast<EncoderModel*>(this)->collect(src);
    copy.collect(dst);
    copy_tensors(dst, src);
    return copy;
}

EncoderModel truncate_encoder(const EncoderModel& enc, int l, int k) {
    EncoderConfig cfg = enc.cfg;
    EncoderModel out = build_encoder(cfg);
    out.backbone.set_truncation(l, k);
    // rebuild the projection head for the truncated width
    const int feat = out.backbone.feature_dim();
    const int hidden = cfg.proj_hidden > 0 ? cfg.proj_hidden : feat;
    Rng rng(derive_seed(cfg.backbone.init_seed, strf("projector.trunc.", l, ".", k)));
    out.projector = Sequential();
    out.projector.add(std::make_unique<Linear>(feat, hidden, rng));
    out.projector.add(std::make_unique<ReLU>());
    out.projector.add(std::make_unique<Linear>(hidden, cfg.proj_dim, rng));
    // copy backbone weights only
    std::vector<NamedTensor> src, dst;
    const_cast<EncoderModel&>(enc).backbone.collect(src);
    out.backbone.collect(dst);
    copy_tensors(dst, src);
    return out;
}

Sequential make_mlp(int in, int hidden, int out, Rng& rng) {
    Sequential s;
    s.add(std::make_unique<Linear>(in, hidden, rng));
    s.add(std::make_unique<ReLU>());
    s.add(std::make_unique<Linear>(hidden, out, rng));
    return s;
}

// ---- GeneratorNet ----------------------------------------------------------------------

Tensor GeneratorNet::residual(const Tensor& x, bool train) {
    Tensor r = net.forward(x, train);
    const float a = static_cast<float>(cfg.amplitude);
    for (float& v : r.data) v *= a;
    return r;
}

Tensor GeneratorNet::backward(const Tensor& gres) {
    Tensor g = gres;
    const float a = static_cast<float>(cfg.amplitude);
    for (float& v : g.data) v *= a;
    return net.backward(g);
}

void GeneratorNet::collect(std::vector<NamedTensor>& out) { net.collect("gen", out); }

Image GeneratorNet::residual_image(const Image& img) {
    std::vector<const Image*> one{&img};
    Tensor r = residual(images_to_tensor(one), false);
    Image out = tensor_to_image(r, 0);
    return out;
}

GeneratorNet build_generator(const GeneratorConfig& cfg) {
    check(cfg.base_channels >= 2, "generator: base_channels must be >= 2");
    check(cfg.amplitude > 0, "generator: amplitude must be positive");
    GeneratorNet g;
    g.cfg = cfg;
    Rng rng(cfg.init_seed);
    const int c = cfg.base_channels;
    auto conv_bn_relu = [&](int ci, int co, int stride) {
        g.net.add(std::make_unique<Conv2d>(ci, co, 3, stride, 1, rng));
        g.net.add(std::make_unique<BatchNorm2d>(co));
        g.net.add(std::make_unique<ReLU>());
    };
    conv_bn_relu(3, c, 1);
    conv_bn_relu(c, 2 * c, 2);
    conv_bn_relu(2 * c, 4 * c, 2);
    g.net.add(std::make_unique<Upsample2x>());
    conv_bn_relu(4 * c, 2 * c, 1);
    g.net.add(std::make_unique<Upsample2x>());
    conv_bn_relu(2 * c, c, 1);
    g.net.add(std::make_unique<Conv2d>(c, 3, 3, 1, 1, rng, 1, /*bias=*/true));
    g.net.add(std::make_unique<Tanh>());
    return g;
}

// ---- Classifier -------------------------------------------------------------------------

namespace {
Linear make_head(int in, int classes, std::uint64_t seed) {
    Rng rng(seed);
    return Linear(in, classes, rng);
}
}  // namespace

Classifier::Classifier(EncoderModel e, int classes, std::uint64_t head_seed)
    : enc(std::move(e)),
      head(make_head(enc.backbone.feature_dim(), classes, head_seed)),
      num_classes(classes) {}

Tensor Classifier::logits(const Tensor& x, bool train) {
    return head.forward(enc.features(x, train), train);
}

Tensor Classifier::backward_to_input(const Tensor& glogits) {
    return enc.backbone.backward_features(head.backward(glogits));
}

void Classifier::collect(std::vector<NamedTensor>& out) {
    enc.backbone.collect(out);
    head.collect("head", out);
}

Classifier Classifier::clone() const {
    Classifier copy(enc.clone(), num_classes, 1);
    std::vector<NamedTensor> src, dst;
    const_cast<Classifier*>(this)->head.collect("head", src);
    copy.head.collect("head", dst);
    copy_tensors(dst, src);
    return copy;
}

// ---- checkpoints --------------------------------------------------------------------------

namespace {
template <class T>
void put(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
}  // namespace

void save_checkpoint(const std::string& path, const std::string& config_json,
                     const std::vector<NamedTensor>& tensors) {
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "save_checkpoint: cannot write ", path);
    out.write("BKLB", 4);
    put<std::uint32_t>(out, 1);
    put<std::uint64_t>(out, config_json.size());
    out.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
    put<std::uint64_t>(out, tensors.size());
    for (const auto& t : tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value->shape.size()));
        for (int d : t.value->shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        out.write(reinterpret_cast<const char*>(t.value->data.data()),
                  static_cast<std::streamsize>(t.value->data.size() * sizeof(float)));
    }
    check(out.good(), "save_checkpoint: write failed for ", path);
}

std::string load_checkpoint(const std::string& path, std::vector<NamedTensor>& into) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "load_checkpoint: cannot open ", path);
    char magic[4];
    in.read(magic, 4);
    check(in.good() && std::memcmp(magic, "BKLB", 4) == 0, "load_checkpoint: ", path,
          " is not a checkpoint file");
    const auto version = get<std::uint32_t>(in);
    check(version == 1, "load_checkpoint: unsupported version ", version);
    const auto jlen = get<std::uint64_t>(in);
    std::string config(jlen, '\0');
    in.read(config.data(), static_cast<std::streamsize>(jlen));
    const auto count = get<std::uint64_t>(in);

    std::map<std::string, NamedTensor*> by_name;
    for (auto& t : into) {
        check(!by_name.count(t.name), "load_checkpoint: duplicate target tensor ", t.name);
        by_name[t.name] = &t;
    }
    std::size_t filled = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto nlen = get<std::uint32_t>(in);
        std::string name(nlen, '\0');
        in.read(name.data(), nlen);
        const auto rank = get<std::uint32_t>(in);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(get<std::uint32_t>(in));
        const std::size_t numel = Tensor::numel_of(shape);
        auto it = by_name.find(name);
        check(it != by_name.end(), "load_checkpoint: file tensor '", name,
              "' has no destination in the model");
        check(it->second->value->shape == shape, "load_checkpoint: shape mismatch for '", name,
              "': file ", Tensor(shape).shape_str(), " vs model ",
              it->second->value->shape_str());
        in.read(reinterpret_cast<char*>(it->second->value->data.data()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        ++filled;
    }
    check(in.good(), "load_checkpoint: truncated file ", path);
    check(filled == into.size(), "load_checkpoint: file has ", filled, " of ", into.size(),
          " model tensors");
    return config;
}

std::string checkpoint_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "checkpoint_config: cannot open ", path);
    char magic[4];
    in.read(magic, 4);
    check(in.good() && std::memcmp(magic, "BKLB", 4) == 0, "checkpoint_config: ", path,
          " is not a checkpoint file");
    get<std::uint32_t>(in);
    const auto jlen = get<std::uint64_t>(in);
    std::string config(jlen, '\0');
    in.read(config.data(), static_cast<std::streamsize>(jlen));
    check(in.good(), "checkpoint_config: truncated file ", path);
    return config;
}

}  // namespace backlab::nn
