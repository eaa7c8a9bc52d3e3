#include "backlab/nn.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace backlab::nn {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

// ---- Conv2d -----------------------------------------------------------------

Conv2d::Conv2d(int cin_, int cout_, int k_, int stride_, int pad_, Rng& rng, int groups_,
               bool bias)
    : cin(cin_), cout(cout_), k(k_), stride(stride_), pad(pad_), groups(groups_),
      has_bias(bias) {
    check(cin % groups == 0 && cout % groups == 0, "conv2d: channels (", cin, ",", cout,
          ") not divisible by groups ", groups);
    const int cig = cin / groups;
    W = Tensor({cout, cig, k, k});
    gW = Tensor({cout, cig, k, k});
    init_kaiming(W, cig * k * k, rng);
    if (has_bias) {
        b = Tensor({cout});
        gb = Tensor({cout});
    }
}

namespace {

void im2col(const float* x, int cig, int h, int w, int k, int stride, int pad, int oh, int ow,
            float* col) {
    // col layout: row-major [cig*k*k x oh*ow]
    const int M = oh * ow;
    for (int ci = 0; ci < cig; ++ci) {
        const float* plane = x + static_cast<std::size_t>(ci) * h * w;
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                float* row = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * M;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    float* dst = row + oy * ow;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + ow, 0.0f);
                        continue;
                    }
                    const float* srow = plane + iy * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        dst[ox] = (ix >= 0 && ix < w) ? srow[ix] : 0.0f;
                    }
                }
            }
    }
}

void col2im_add(const float* col, int cig, int h, int w, int k, int stride, int pad, int oh,
                int ow, float* gx) {
    const int M = oh * ow;
    for (int ci = 0; ci < cig; ++ci) {
        float* plane = gx + static_cast<std::size_t>(ci) * h * w;
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const float* row = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * M;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    float* drow = plane + iy * w;
                    const float* srow = row + oy * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) drow[ix] += srow[ox];
                    }
                }
            }
    }
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x, bool) {
    check(x.rank() == 4 && x.dim(1) == cin, "conv2d: bad input ", x.shape_str(), ", expected cin ",
          cin);
    cached_x = x;
    const int N = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int oh = (h + 2 * pad - k) / stride + 1;
    const int ow = (w + 2 * pad - k) / stride + 1;
    check(oh > 0 && ow > 0, "conv2d: output collapsed for input ", x.shape_str());
    const int cig = cin / groups, cog = cout / groups;
    const int K = cig * k * k, M = oh * ow;

    Tensor y({N, cout, oh, ow});
    std::vector<float> colbuf(static_cast<std::size_t>(K) * M);
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const float* xin =
                x.data.data() + (static_cast<std::size_t>(n) * cin + g * cig) * h * w;
            im2col(xin, cig, h, w, k, stride, pad, oh, ow, colbuf.data());
            CMapRM colm(colbuf.data(), K, M);
            CMapRM wm(W.data.data() + static_cast<std::size_t>(g) * cog * K, cog, K);
            MapRM ym(y.data.data() + (static_cast<std::size_t>(n) * cout + g * cog) * M, cog, M);
            ym.noalias() = wm * colm;
            if (has_bias)
                for (int oc = 0; oc < cog; ++oc) ym.row(oc).array() += b.data[g * cog + oc];
        }
    }
    return y;
}

Tensor Conv2d::backward(const Tensor& gy) {
    const Tensor& x = cached_x;
    const int N = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int oh = gy.dim(2), ow = gy.dim(3);
    const int cig = cin / groups, cog = cout / groups;
    const int K = cig * k * k, M = oh * ow;

    Tensor gx(x.shape);
    std::vector<float> colbuf(static_cast<std::size_t>(K) * M);
    std::vector<float> gcolbuf(static_cast<std::size_t>(K) * M);
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const float* xin =
                x.data.data() + (static_cast<std::size_t>(n) * cin + g * cig) * h * w;
            im2col(xin, cig, h, w, k, stride, pad, oh, ow, colbuf.data());
            CMapRM colm(colbuf.data(), K, M);
            CMapRM gym(gy.data.data() + (static_cast<std::size_t>(n) * cout + g * cog) * M, cog,
                       M);
            MapRM gwm(gW.data.data() + static_cast<std::size_t>(g) * cog * K, cog, K);
            gwm.noalias() += gym * colm.transpose();
            if (has_bias)
                for (int oc = 0; oc < cog; ++oc) gb.data[g * cog + oc] += gym.row(oc).sum();
            CMapRM wm(W.data.data() + static_cast<std::size_t>(g) * cog * K, cog, K);
            MapRM gcolm(gcolbuf.data(), K, M);
            gcolm.noalias() = wm.transpose() * gym;
            float* gxout = gx.data.data() + (static_cast<std::size_t>(n) * cin + g * cig) * h * w;
            col2im_add(gcolbuf.data(), cig, h, w, k, stride, pad, oh, ow, gxout);
        }
    }
    return gx;
}

void Conv2d::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".W", &W, &gW, true});
    if (has_bias) out.push_back({prefix + ".b", &b, &gb, false});
}

void Conv2d::zero_out_channel(int oc) {
    check(oc >= 0 && oc < cout, "conv2d: channel ", oc, " out of range");
    const int cig = cin / groups;
    const std::size_t K = static_cast<std::size_t>(cig) * k * k;
    std::fill(W.data.begin() + oc * K, W.data.begin() + (oc + 1) * K, 0.0f);
    if (has_bias) b.data[oc] = 0.0f;
}

// ---- BatchNorm2d -------------------------------------------------------------

BatchNorm2d::BatchNorm2d(int c_) : c(c_) {
    gamma = Tensor({c}, 1.0f);
    beta = Tensor({c}, 0.0f);
    ggamma = Tensor({c});
    gbeta = Tensor({c});
    running_mean = Tensor({c}, 0.0f);
    running_var = Tensor({c}, 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool train) {
    check(x.rank() == 4 && x.dim(1) == c, "batchnorm2d: bad input ", x.shape_str());
    const int N = x.dim(0), H = x.dim(2), W_ = x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W_;
    const std::size_t m = static_cast<std::size_t>(N) * plane;
    cached_train = train;
    Tensor y(x.shape);
    xhat = Tensor(x.shape);
    invstd.assign(c, 0.0f);

    for (int ch = 0; ch < c; ++ch) {
        double mu, var;
        if (train) {
            double s = 0.0, s2 = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = x.data.data() + (static_cast<std::size_t>(n) * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    s += p[i];
                    s2 += static_cast<double>(p[i]) * p[i];
                }
            }
            mu = s / static_cast<double>(m);
            var = s2 / static_cast<double>(m) - mu * mu;
            var = std::max(var, 0.0);
            running_mean.data[ch] =
                static_cast<float>((1.0 - momentum) * running_mean.data[ch] + momentum * mu);
            running_var.data[ch] =
                static_cast<float>((1.0 - momentum) * running_var.data[ch] + momentum * var);
        } else {
            mu = running_mean.data[ch];
            var = running_var.data[ch];
        }
        const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        invstd[ch] = is;
        const float g = gamma.data[ch], bb = beta.data[ch], muf = static_cast<float>(mu);
        for (int n = 0; n < N; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * c + ch) * plane;
            const float* p = x.data.data() + off;
            float* xh = xhat.data.data() + off;
            float* yo = y.data.data() + off;
            for (std::size_t i = 0; i < plane; ++i) {
                xh[i] = (p[i] - muf) * is;
                yo[i] = g * xh[i] + bb;
            }
        }
    }
    return y;
}

Tensor BatchNorm2d::backward(const Tensor& gy) {
    const int N = gy.dim(0), H = gy.dim(2), W_ = gy.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W_;
    const double m = static_cast<double>(N) * plane;
    Tensor gx(gy.shape);

    for (int ch = 0; ch < c; ++ch) {
        double sum_gy = 0.0, sum_gy_xhat = 0.0;
        for (int n = 0; n < N; ++n) {
            const std::size_t off = (static_cast<std::size_t>(n) * c + ch) * plane;
            const float* gyp = gy.data.data() + off;
            const float* xh = xhat.data.data() + off;
            for (std::size_t i = 0; i < plane; ++i) {
                sum_gy += gyp[i];
                sum_gy_xhat += static_cast<double>(gyp[i]) * xh[i];
            }
        }
        ggamma.data[ch] += static_cast<float>(sum_gy_xhat);
        gbeta.data[ch] += static_cast<float>(sum_gy);
        const float g = gamma.data[ch], is = invstd[ch];
        if (cached_train) {
            const float a = static_cast<float>(sum_gy / m);
            const float bterm = static_cast<float>(sum_gy_xhat / m);
            for (int n = 0; n < N; ++n) {
                const std::size_t off = (static_cast<std::size_t>(n) * c + ch) * plane;
                const float* gyp = gy.data.data() + off;
                const float* xh = xhat.data.data() + off;
                float* gxp = gx.data.data() + off;
                for (std::size_t i = 0; i < plane; ++i)
                    gxp[i] = g * is * (gyp[i] - a - xh[i] * bterm);
            }
        } else {
            for (int n = 0; n < N; ++n) {
                const std::size_t off = (static_cast<std::size_t>(n) * c + ch) * plane;
                const float* gyp = gy.data.data() + off;
                float* gxp = gx.data.data() + off;
                for (std::size_t i = 0; i < plane; ++i) gxp[i] = g * is * gyp[i];
            }
        }
    }
    return gx;
}

void BatchNorm2d::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
    out.push_back({prefix + ".gamma", &gamma, &ggamma, false});
    out.push_back({prefix + ".beta", &beta, &gbeta, false});
    out.push_back({prefix + ".running_mean", &running_mean, nullptr, false});
    out.push_back({prefix + ".running_var", &running_var, nullptr, false});
}

void BatchNorm2d::zero_channel(int ch) {
    check(ch >= 0 && ch < c, "batchnorm2d: channel out of range");
    gamma.data[ch] = 0.0f;
    beta.data[ch] = 0.0f;
}

// ---- elementwise --------------------------------------------------------------

Tensor ReLU::forward(const Tensor& x, bool) {
    Tensor y = x;
    for (float& v : y.data) v = v > 0.0f ? v : 0.0f;
    cached_out = y;
    return y;
}

Tensor ReLU::backward(const Tensor& gy) {
    Tensor gx = gy;
    for (std::size_t i = 0; i < gx.data.size(); ++i)
        if (cached_out.data[i] <= 0.0f) gx.data[i] = 0.0f;
    return gx;
}

Tensor Tanh::forward(const Tensor& x, bool) {
    Tensor y = x;
    for (float& v : y.data) v = std::tanh(v);
    cached_out = y;
    return y;
}

Tensor Tanh::backward(const Tensor& gy) {
    Tensor gx = gy;
    for (std::size_t i = 0; i < gx.data.size(); ++i) {
        const float t = cached_out.data[i];
        gx.data[i] *= (1.0f - t * t);
    }
    return gx;
}

// ---- Linear --------------------------------------------------------------------

Linear::Linear(int in_, int out_, Rng& rng) : in(in_), out(out_) {
    W = Tensor({out, in});
    gW = Tensor({out, in});
    b = Tensor({out});
    gb = Tensor({out});
    init_kaiming(W, in, rng);
}

Tensor Linear::forward(const Tensor& x, bool) {
    check(x.rank() == 2 && x.dim(1) == in, "linear: bad input ", x.shape_str(), ", expected in ",
          in);
    cached_x = x;
    const int N = x.dim(0);
    Tensor y({N, out});
    CMapRM xm(x.data.data(), N, in);
    CMapRM wm(W.data.data(), out, in);
    MapRM ym(y.data.data(), N, out);
    ym.noalias() = xm * wm.transpose();
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < out; ++o) y.data[static_cast<std::size_t>(n) * out + o] += b.data[o];
    return y;
}

Tensor Linear::backward(const Tensor& gy) {
    const int N = cached_x.dim(0);
    Tensor gx({N, in});
    CMapRM gym(gy.data.data(), N, out);
    CMapRM xm(cached_x.data.data(), N, in);
    MapRM gwm(gW.data.data(), out, in);
    gwm.noalias() += gym.transpose() * xm;
    for (int o = 0; o < out; ++o) gb.data[o] += gym.col(o).sum();
    CMapRM wm(W.data.data(), out, in);
    MapRM gxm(gx.data.data(), N, in);
    gxm.noalias() = gym * wm;
    return gx;
}

void Linear::collect(const std::string& prefix, std::vector<NamedTensor>& out_list) {
    out_list.push_back({prefix + ".W", &W, &gW, true});
    out_list.push_back({prefix + ".b", &b, &gb, false});
}

// ---- pooling / upsample ----------------------------------------------------------

Tensor GlobalAvgPool::forward(const Tensor& x, bool) {
    check(x.rank() == 4, "gap: expected NCHW, got ", x.shape_str());
    cached_shape = x.shape;
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor y({N, C});
    for (int n = 0; n < N; ++n)
        for (int ch = 0; ch < C; ++ch) {
            const float* p = x.data.data() + (static_cast<std::size_t>(n) * C + ch) * plane;
            double s = 0.0;
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
            y.data[static_cast<std::size_t>(n) * C + ch] = static_cast<float>(s / plane);
        }
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& gy) {
    Tensor gx(cached_shape);
    const int N = cached_shape[0], C = cached_shape[1];
    const std::size_t plane = static_cast<std::size_t>(cached_shape[2]) * cached_shape[3];
    const float scale = 1.0f / static_cast<float>(plane);
    for (int n = 0; n < N; ++n)
        for (int ch = 0; ch < C; ++ch) {
            const float g = gy.data[static_cast<std::size_t>(n) * C + ch] * scale;
            float* p = gx.data.data() + (static_cast<std::size_t>(n) * C + ch) * plane;
            std::fill(p, p + plane, g);
        }
    return gx;
}

Tensor Upsample2x::forward(const Tensor& x, bool) {
    check(x.rank() == 4, "upsample2x: expected NCHW");
    cached_shape = x.shape;
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W_ = x.dim(3);
    Tensor y({N, C, H * 2, W_ * 2});
    for (int n = 0; n < N; ++n)
        for (int ch = 0; ch < C; ++ch) {
            const float* src = x.data.data() + (static_cast<std::size_t>(n) * C + ch) * H * W_;
            float* dst =
                y.data.data() + (static_cast<std::size_t>(n) * C + ch) * (H * 2) * (W_ * 2);
            for (int yy = 0; yy < H * 2; ++yy)
                for (int xx = 0; xx < W_ * 2; ++xx)
                    dst[yy * W_ * 2 + xx] = src[(yy / 2) * W_ + (xx / 2)];
        }
    return y;
}

Tensor Upsample2x::backward(const Tensor& gy) {
    Tensor gx(cached_shape);
    const int N = cached_shape[0], C = cached_shape[1], H = cached_shape[2], W_ = cached_shape[3];
    for (int n = 0; n < N; ++n)
        for (int ch = 0; ch < C; ++ch) {
            float* dst = gx.data.data() + (static_cast<std::size_t>(n) * C + ch) * H * W_;
            const float* src =
                gy.data.data() + (static_cast<std::size_t>(n) * C + ch) * (H * 2) * (W_ * 2);
            for (int yy = 0; yy < H * 2; ++yy)
                for (int xx = 0; xx < W_ * 2; ++xx) dst[(yy / 2) * W_ + (xx / 2)] += src[yy * W_ * 2 + xx];
        }
    return gx;
}

// ---- Sequential -------------------------------------------------------------------

Tensor Sequential::forward(const Tensor& x, bool train) {
    Tensor h = x;
    for (auto& l : layers) h = l->forward(h, train);
    return h;
}

Tensor Sequential::backward(const Tensor& gy) {
    Tensor g = gy;
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) g = (*it)->backward(g);
    return g;
}

void Sequential::collect(const std::string& prefix, std::vector<NamedTensor>& out) {
    for (std::size_t i = 0; i < layers.size(); ++i)
        layers[i]->collect(prefix + "." + std::to_string(i), out);
}

void Sequential::visit(const std::function<void(Layer*)>& fn) {
    for (auto& l : layers) l->visit(fn);
}

// ---- optimizer --------------------------------------------------------------------

void zero_grads(std::vector<NamedTensor>& params) {
    for (auto& p : params)
        if (p.grad) p.grad->zero();
}

void SGD::attach(const std::vector<NamedTensor>& all) {
    params.clear();
    velocity.clear();
    for (const auto& p : all)
        if (p.grad) {
            params.push_back(p);
            velocity.emplace_back(p.value->numel(), 0.0f);
        }
}

void SGD::step(double lr) {
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        auto& v = velocity[pi];
        const float wd = p.decay ? static_cast<float>(weight_decay) : 0.0f;
        const float mom = static_cast<float>(momentum);
        const float lrf = static_cast<float>(lr);
        float* w = p.value->data.data();
        const float* g = p.grad->data.data();
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = mom * v[i] + g[i] + wd * w[i];
            w[i] -= lrf * v[i];
        }
    }
}

double cosine_lr(double lr0, int epoch, int total_epochs) {
    check(total_epochs > 0, "cosine_lr: total_epochs must be positive");
    const double pi = std::acos(-1.0);
    return lr0 * 0.5 * (1.0 + std::cos(pi * static_cast<double>(epoch) / total_epochs));
}

void ema_update(std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src,
                double decay) {
    check(dst.size() == src.size(), "ema_update: mismatched tensor lists");
    const float d = static_cast<float>(decay);
    for (std::size_t i = 0; i < dst.size(); ++i) {
        check(dst[i].value->numel() == src[i].value->numel(), "ema_update: size mismatch at ",
              dst[i].name);
        float* t = dst[i].value->data.data();
        const float* s = src[i].value->data.data();
        for (std::size_t j = 0; j < dst[i].value->numel(); ++j)
            t[j] = d * t[j] + (1.0f - d) * s[j];
    }
}

void copy_tensors(std::vector<NamedTensor>& dst, const std::vector<NamedTensor>& src) {
    check(dst.size() == src.size(), "copy_tensors: mismatched tensor lists");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        check(dst[i].value->numel() == src[i].value->numel(), "copy_tensors: size mismatch at ",
              dst[i].name);
        dst[i].value->data = src[i].value->data;
    }
}

}  // namespace backlab::nn
