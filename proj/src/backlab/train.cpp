#include "backlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

using nlohmann::json;

namespace backlab::train {

const char* method_name(Method m) {
    switch (m) {
        case Method::supervised: return "supervised";
        case Method::simclr: return "simclr";
        case Method::byol: return "byol";
        case Method::moco: return "moco";
    }
    return "?";
}

Method method_from_name(const std::string& s) {
    if (s == "supervised") return Method::supervised;
    if (s == "simclr") return Method::simclr;
    if (s == "byol") return Method::byol;
    if (s == "moco") return Method::moco;
    throw error(strf("unknown training method '", s,
                     "' (expected supervised|simclr|byol|moco)"));
}

bool is_contrastive(Method m) { return m != Method::supervised; }

void TrainConfig::validate() const {
    check(epochs > 0, "train config: epochs must be positive, got ", epochs);
    check(batch_size >= 2, "train config: batch_size must be >= 2, got ", batch_size);
    check(lr > 0 && std::isfinite(lr), "train config: lr must be positive, got ", lr);
    check(momentum >= 0 && momentum < 1, "train config: momentum must lie in [0,1)");
    check(weight_decay >= 0, "train config: weight_decay must be >= 0");
    check(tau > 0, "train config: tau must be positive, got ", tau);
    check(byol_ema > 0 && byol_ema < 1, "train config: byol_ema must lie in (0,1)");
    check(moco_ema > 0 && moco_ema < 1, "train config: moco_ema must lie in (0,1)");
    check(moco_queue >= 1, "train config: moco_queue must be >= 1");
    check(generator_epochs >= 0, "train config: generator_epochs must be >= 0");
}

// ---- dynamics log ------------------------------------------------------------

void DynamicsLog::save_csv(const std::string& path) const {
    std::ofstream out(path);
    check(out.good(), "DynamicsLog::save_csv: cannot write ", path);
    out << "epoch,clean_mean_loss,poison_mean_loss,lr\n";
    out.precision(10);
    for (std::size_t i = 0; i < epoch.size(); ++i)
        out << epoch[i] << "," << clean_loss[i] << "," << poison_loss[i] << "," << lr[i] << "\n";
}

void DynamicsLog::save_trace(const std::string& path) const {
    std::ofstream out(path);
    check(out.good(), "DynamicsLog::save_trace: cannot write ", path);
    out.precision(10);
    out << "epoch";
    if (!per_sample.empty())
        for (std::size_t i = 0; i < per_sample[0].size(); ++i) out << ",s" << i;
    out << "\n";
    for (std::size_t e = 0; e < per_sample.size(); ++e) {
        out << epoch[e];
        for (double v : per_sample[e]) out << "," << v;
        out << "\n";
    }
}

DynamicsLog DynamicsLog::load_csv(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "DynamicsLog::load_csv: cannot open ", path);
    std::string line;
    check(static_cast<bool>(std::getline(in, line)), "DynamicsLog::load_csv: empty file");
    check(line == "epoch,clean_mean_loss,poison_mean_loss,lr",
          "DynamicsLog::load_csv: unexpected header '", line, "'");
    DynamicsLog log;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');
        log.epoch.push_back(std::stoi(tok));
        std::getline(ss, tok, ',');
        log.clean_loss.push_back(std::stod(tok));
        std::getline(ss, tok, ',');
        log.poison_loss.push_back(std::stod(tok));
        std::getline(ss, tok, ',');
        log.lr.push_back(std::stod(tok));
    }
    return log;
}

std::vector<std::vector<double>> DynamicsLog::load_trace(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "DynamicsLog::load_trace: cannot open ", path);
    std::string line;
    check(static_cast<bool>(std::getline(in, line)), "DynamicsLog::load_trace: empty file");
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::istringstream ss(line);
        std::string tok;
        std::getline(ss, tok, ',');  // epoch column
        while (std::getline(ss, tok, ',')) row.push_back(std::stod(tok));
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---- helpers ------------------------------------------------------------------

namespace {

Image make_view(const Image& img, const data::AugmentationPolicy& aug, std::uint64_t seed) {
    Rng rng(seed);
    return data::augment(img, aug, rng);
}

// residual application with clip; mask records pass-through positions
nn::Tensor apply_residual_rows(nn::Tensor& x, const std::vector<int>& rows,
                               const nn::Tensor& residuals, std::vector<char>& mask) {
    const std::size_t plane = x.numel() / x.dim(0);
    mask.assign(residuals.numel(), 0);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        float* dst = x.data.data() + static_cast<std::size_t>(rows[r]) * plane;
        const float* res = residuals.data.data() + r * plane;
        char* m = mask.data() + r * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            const float v = dst[i] + res[i];
            if (v >= 0.0f && v <= 1.0f) {
                dst[i] = v;
                m[i] = 1;
            } else {
                dst[i] = std::clamp(v, 0.0f, 1.0f);
            }
        }
    }
    return x;
}

// pull the gradient rows for the generator: grad at clipped pixels is zero
nn::Tensor slice_grad_rows(const nn::Tensor& gx, const std::vector<int>& rows,
                           const std::vector<char>& mask, const std::vector<int>& shape_like) {
    nn::Tensor g(shape_like);
    const std::size_t plane = gx.numel() / gx.dim(0);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const float* src = gx.data.data() + static_cast<std::size_t>(rows[r]) * plane;
        float* dst = g.data.data() + r * plane;
        const char* m = mask.data() + r * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = m[i] ? src[i] : 0.0f;
    }
    return g;
}

struct DynDraw {
    std::vector<int> backdoor_rows;  // positions within the batch
    std::vector<int> cross_rows;
    std::vector<int> cross_partner;  // batch position of the residual source
};

DynDraw draw_modes(int bsz, double rho_a, double rho_b, Rng& rng) {
    DynDraw d;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < bsz; ++i) {
        const double r = u(rng);
        if (r < rho_a) {
            d.backdoor_rows.push_back(i);
        } else if (r < rho_a + rho_b && bsz > 1) {
            d.cross_rows.push_back(i);
            std::uniform_int_distribution<int> pick(0, bsz - 2);
            int j = pick(rng);
            if (j >= i) ++j;
            d.cross_partner.push_back(j);
        }
    }
    return d;
}

}  // namespace

// ---- main training loop ----------------------------------------------------------

TrainResult train(const data::ImageDataset& ds, const std::vector<bool>& poison_flags,
                  const nn::EncoderConfig& enc_cfg, const TrainConfig& cfg,
                  const data::PoisonSpec* dyn_spec) {
    cfg.validate();
    ds.validate();
    const int N = ds.size();
    std::vector<bool> static_flags = poison_flags;
    if (static_flags.empty()) static_flags.assign(N, false);
    check(static_cast<int>(static_flags.size()) == N, "train: poison_flags size ",
          static_flags.size(), " != dataset size ", N);

    const bool dynamic =
        dyn_spec != nullptr && dyn_spec->trig.kind == trigger::TriggerKind::dynamic_gen;
    if (dyn_spec && !dynamic)
        throw error("train: dyn_spec must carry a dynamic trigger (static triggers are baked "
                    "into the dataset beforehand)");

    TrainResult res;
    res.encoder = nn::build_encoder(enc_cfg);
    nn::EncoderModel& enc = res.encoder;
    const int feat_dim = enc.backbone.feature_dim();
    const int proj_dim = enc_cfg.proj_dim;

    // method-specific companions
    std::optional<nn::Linear> head;
    std::optional<nn::EncoderModel> target_enc;  // byol target / moco key encoder
    std::optional<nn::Sequential> predictor;
    nn::Tensor queue;
    int queue_ptr = 0;
    if (cfg.method == Method::supervised) {
        Rng hr(derive_seed(cfg.seed, "head"));
        head.emplace(feat_dim, ds.num_classes, hr);
    } else if (cfg.method == Method::byol) {
        target_enc = enc.clone();
        Rng pr(derive_seed(cfg.seed, "predictor"));
        predictor = nn::make_mlp(proj_dim, proj_dim, proj_dim, pr);
    } else if (cfg.method == Method::moco) {
        target_enc = enc.clone();
        queue = nn::Tensor({cfg.moco_queue, proj_dim});
        Rng qr(derive_seed(cfg.seed, "queue"));
        std::normal_distribution<float> g(0.0f, 1.0f);
        for (int i = 0; i < cfg.moco_queue; ++i) {
            double norm2 = 0.0;
            for (int j = 0; j < proj_dim; ++j) {
                const float v = g(qr);
                queue.data[static_cast<std::size_t>(i) * proj_dim + j] = v;
                norm2 += static_cast<double>(v) * v;
            }
            const float inv = static_cast<float>(1.0 / std::sqrt(std::max(norm2, 1e-12)));
            for (int j = 0; j < proj_dim; ++j)
                queue.data[static_cast<std::size_t>(i) * proj_dim + j] *= inv;
        }
    }

    std::optional<nn::GeneratorNet> gen;
    if (dynamic) {
        nn::GeneratorConfig gcfg;
        gcfg.base_channels = dyn_spec->trig.dyn.base_channels;
        gcfg.amplitude = dyn_spec->trig.dyn.amplitude;
        gcfg.init_seed = derive_seed(dyn_spec->trig.dyn.init_seed, "generator");
        gen = nn::build_generator(gcfg);
    }

    // optimizer over the online parameters
    std::vector<nn::NamedTensor> trainables;
    if (cfg.method == Method::supervised) {
        enc.backbone.collect(trainables);
        head->collect("head", trainables);
    } else {
        enc.collect(trainables);
        if (predictor) predictor->collect("pred", trainables);
    }
    nn::SGD opt;
    opt.momentum = cfg.momentum;
    opt.weight_decay = cfg.weight_decay;
    opt.attach(trainables);

    std::vector<nn::NamedTensor> gen_tensors;
    nn::SGD gen_opt;
    if (gen) {
        gen->collect(gen_tensors);
        gen_opt.momentum = cfg.momentum;
        gen_opt.weight_decay = cfg.weight_decay;
        gen_opt.attach(gen_tensors);
    }

    // EMA tensor lists (values only; collected once, stable pointers)
    std::vector<nn::NamedTensor> online_list, target_list;
    if (target_enc) {
        enc.collect(online_list);
        target_enc->collect(target_list);
    }

    res.log = DynamicsLog{};
    const double rho_a = dynamic ? dyn_spec->trig.dyn.rho_a : 0.0;
    const double rho_b = dynamic ? dyn_spec->trig.dyn.rho_b : 0.0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = nn::cosine_lr(cfg.lr, epoch, cfg.epochs);
        Rng perm_rng(derive_seed(cfg.seed, strf("perm.", epoch)));
        std::vector<int> perm(N);
        for (int i = 0; i < N; ++i) perm[i] = i;
        std::shuffle(perm.begin(), perm.end(), perm_rng);

        std::vector<double> ps(N, 0.0);
        std::vector<bool> epoch_flags = static_flags;
        Rng mode_rng(derive_seed(cfg.seed, strf("modes.", epoch)));
        const bool gen_training = dynamic && epoch < cfg.generator_epochs;

        for (int b0 = 0; b0 < N; b0 += cfg.batch_size) {
            const int bsz = std::min(cfg.batch_size, N - b0);
            if (cfg.method != Method::supervised && bsz < 2) continue;
            std::vector<int> idxs(perm.begin() + b0, perm.begin() + b0 + bsz);

            auto view_seed = [&](int row, int view) {
                return derive_seed(cfg.seed, strf("aug.", epoch, ".", idxs[row], ".", view));
            };
            std::vector<int> labels(bsz);
            for (int i = 0; i < bsz; ++i) labels[i] = ds.labels[idxs[i]];

            DynDraw dd;
            if (dynamic) {
                dd = draw_modes(bsz, rho_a, rho_b, mode_rng);
                for (int r : dd.backdoor_rows) {
                    labels[r] = dyn_spec->target_class;
                    epoch_flags[idxs[r]] = true;
                }
            }

            nn::zero_grads(trainables);
            if (gen) nn::zero_grads(gen_tensors);
            double batch_loss = 0.0;

            // Builds one augmented-view tensor; rowmap(i) gives the batch row
            // of sample i in that tensor.
            auto build_views = [&](int view, int rows_per_sample) {
                std::vector<Image> imgs;
                imgs.reserve(static_cast<std::size_t>(bsz) * rows_per_sample);
                for (int i = 0; i < bsz; ++i)
                    for (int v = 0; v < rows_per_sample; ++v)
                        imgs.push_back(
                            make_view(ds.images[idxs[i]], cfg.aug, view_seed(i, view + v)));
                return nn::images_to_tensor(imgs);
            };

            // dynamic trigger application to one view tensor (in place);
            // returns rows/mask for the backward hook into the generator
            struct DynHook {
                std::vector<int> rows;
                std::vector<char> mask;
                std::vector<int> res_shape;
                bool active = false;
            };
            auto apply_dynamic = [&](nn::Tensor& x, int view_offset) -> DynHook {
                DynHook hook;
                if (!dynamic || (dd.backdoor_rows.empty() && dd.cross_rows.empty())) return hook;
                std::vector<int> tgt_rows;
                std::vector<int> src_rows;
                for (int r : dd.backdoor_rows) {
                    tgt_rows.push_back(r);
                    src_rows.push_back(r);
                }
                for (std::size_t ci = 0; ci < dd.cross_rows.size(); ++ci) {
                    tgt_rows.push_back(dd.cross_rows[ci]);
                    src_rows.push_back(dd.cross_partner[ci]);
                }
                (void)view_offset;
                // gather source rows into one tensor
                const std::size_t plane = x.numel() / x.dim(0);
                nn::Tensor src({static_cast<int>(src_rows.size()), x.dim(1), x.dim(2), x.dim(3)});
                for (std::size_t r = 0; r < src_rows.size(); ++r)
                    std::copy(x.data.begin() + static_cast<std::size_t>(src_rows[r]) * plane,
                              x.data.begin() + (static_cast<std::size_t>(src_rows[r]) + 1) * plane,
                              src.data.begin() + r * plane);
                nn::Tensor res = gen->residual(src, true);
                apply_residual_rows(x, tgt_rows, res, hook.mask);
                hook.rows = tgt_rows;
                hook.res_shape = res.shape;
                // only backdoor rows feed the generator loss; cross rows are
                // regularizers whose gradient also flows (shared mask layout)
                hook.active = true;
                return hook;
            };
            auto gen_backward = [&](const nn::Tensor& gx, const DynHook& hook) {
                if (!hook.active || !gen_training) return;
                nn::Tensor gres = slice_grad_rows(gx, hook.rows, hook.mask, hook.res_shape);
                gen->backward(gres);
            };

            switch (cfg.method) {
                case Method::supervised: {
                    nn::Tensor x = build_views(0, 1);
                    DynHook hook = apply_dynamic(x, 0);
                    nn::Tensor logits = head->forward(enc.features(x, true), true);
                    auto ce = nn::cross_entropy(logits, labels);
                    batch_loss = ce.loss;
                    for (int i = 0; i < bsz; ++i) ps[idxs[i]] = ce.per_sample[i];
                    nn::Tensor gx = enc.backbone.backward_features(head->backward(ce.glogits));
                    gen_backward(gx, hook);
                    break;
                }
                case Method::simclr: {
                    // interleaved rows (2i, 2i+1)
                    nn::Tensor x = build_views(0, 2);
                    DynHook hook;
                    if (dynamic) {
                        // both views of selected samples carry the residual
                        DynDraw expanded;
                        for (int r : dd.backdoor_rows) {
                            expanded.backdoor_rows.push_back(2 * r);
                            expanded.backdoor_rows.push_back(2 * r + 1);
                        }
                        for (std::size_t ci = 0; ci < dd.cross_rows.size(); ++ci) {
                            expanded.cross_rows.push_back(2 * dd.cross_rows[ci]);
                            expanded.cross_rows.push_back(2 * dd.cross_rows[ci] + 1);
                            expanded.cross_partner.push_back(2 * dd.cross_partner[ci]);
                            expanded.cross_partner.push_back(2 * dd.cross_partner[ci] + 1);
                        }
                        std::swap(dd, expanded);
                        hook = apply_dynamic(x, 0);
                        std::swap(dd, expanded);
                    }
                    nn::Tensor z = enc.encode(x, true);
                    auto nt = nn::ntxent_loss(z, cfg.tau);
                    batch_loss = nt.loss;
                    for (int i = 0; i < bsz; ++i) ps[idxs[i]] = nt.per_sample[i];
                    nn::Tensor gx = enc.backward(nt.gz);
                    gen_backward(gx, hook);
                    break;
                }
                case Method::byol: {
                    double total = 0.0;
                    for (int pass = 0; pass < 2; ++pass) {
                        nn::Tensor online_x = build_views(pass == 0 ? 0 : 1, 1);
                        nn::Tensor target_x = build_views(pass == 0 ? 1 : 0, 1);
                        DynHook hook_t = apply_dynamic(target_x, 0);
                        (void)hook_t;  // target path carries no gradient
                        DynHook hook = apply_dynamic(online_x, 0);
                        nn::Tensor tz = target_enc->encode(target_x, true);
                        nn::Tensor q = predictor->forward(enc.encode(online_x, true), true);
                        auto bl = nn::byol_loss(q, tz);
                        total += bl.loss;
                        for (int i = 0; i < bsz; ++i) ps[idxs[i]] += 0.5 * bl.per_sample[i];
                        nn::Tensor gx = enc.backward(predictor->backward(bl.gpred));
                        gen_backward(gx, hook);
                    }
                    batch_loss = total / 2.0;
                    break;
                }
                case Method::moco: {
                    nn::Tensor key_x = build_views(1, 1);
                    DynHook hook_k = apply_dynamic(key_x, 0);
                    (void)hook_k;
                    nn::Tensor k = target_enc->encode(key_x, true);
                    nn::Tensor query_x = build_views(0, 1);
                    DynHook hook = apply_dynamic(query_x, 0);
                    nn::Tensor q = enc.encode(query_x, true);
                    auto mo = nn::moco_loss(q, k, queue, cfg.tau);
                    batch_loss = mo.loss;
                    for (int i = 0; i < bsz; ++i) ps[idxs[i]] = mo.per_sample[i];
                    nn::Tensor gx = enc.backward(mo.gquery);
                    gen_backward(gx, hook);
                    // FIFO enqueue of normalized keys
                    for (int i = 0; i < bsz; ++i) {
                        double n2 = 0.0;
                        for (int j = 0; j < proj_dim; ++j) {
                            const double v = k.data[static_cast<std::size_t>(i) * proj_dim + j];
                            n2 += v * v;
                        }
                        const float inv =
                            static_cast<float>(1.0 / std::sqrt(std::max(n2, 1e-12)));
                        for (int j = 0; j < proj_dim; ++j)
                            queue.data[static_cast<std::size_t>(queue_ptr) * proj_dim + j] =
                                k.data[static_cast<std::size_t>(i) * proj_dim + j] * inv;
                        queue_ptr = (queue_ptr + 1) % cfg.moco_queue;
                    }
                    break;
                }
            }

            check(std::isfinite(batch_loss), "train: loss diverged (non-finite) at epoch ",
                  epoch, ", batch ", b0 / cfg.batch_size);
            opt.step(lr);
            if (gen && gen_training) gen_opt.step(lr);
            if (cfg.method == Method::byol)
                nn::ema_update(target_list, online_list, cfg.byol_ema);
            else if (cfg.method == Method::moco)
                nn::ema_update(target_list, online_list, cfg.moco_ema);
        }

        // epoch bookkeeping
        double clean_sum = 0.0, poison_sum = 0.0;
        int clean_n = 0, poison_n = 0;
        for (int i = 0; i < N; ++i) {
            if (epoch_flags[i]) {
                poison_sum += ps[i];
                ++poison_n;
            } else {
                clean_sum += ps[i];
                ++clean_n;
            }
        }
        res.log.epoch.push_back(epoch);
        res.log.clean_loss.push_back(clean_n ? clean_sum / clean_n : 0.0);
        res.log.poison_loss.push_back(poison_n ? poison_sum / poison_n : 0.0);
        res.log.lr.push_back(lr);
        if (cfg.log_per_sample) res.log.per_sample.push_back(std::move(ps));
    }

    if (cfg.method == Method::supervised) {
        nn::Classifier clf(enc.clone(), ds.num_classes, derive_seed(cfg.seed, "head"));
        std::vector<nn::NamedTensor> src, dst;
        head->collect("head", src);
        clf.head.collect("head", dst);
        nn::copy_tensors(dst, src);
        res.classifier = std::move(clf);
    }
    if (gen) res.generator = std::move(*gen);
    return res;
}

// ---- downstream --------------------------------------------------------------------

nn::Tensor encode_dataset(nn::EncoderModel& enc, const data::ImageDataset& ds, int batch_size,
                          bool projected) {
    check(batch_size >= 1, "encode_dataset: batch_size must be >= 1");
    const int N = ds.size();
    const int dim = projected ? enc.cfg.proj_dim : enc.backbone.feature_dim();
    nn::Tensor out({N, dim});
    for (int b0 = 0; b0 < N; b0 += batch_size) {
        const int bsz = std::min(batch_size, N - b0);
        std::vector<const Image*> imgs(bsz);
        for (int i = 0; i < bsz; ++i) imgs[i] = &ds.images[b0 + i];
        nn::Tensor f = enc.features(nn::images_to_tensor(imgs), false);
        if (projected) f = enc.project(f, false);
        std::copy(f.data.begin(), f.data.end(),
                  out.data.begin() + static_cast<std::size_t>(b0) * dim);
    }
    return out;
}

nn::Classifier fit_downstream(const nn::EncoderModel& enc, const data::ImageDataset& labeled,
                              const DownstreamConfig& cfg) {
    labeled.validate();
    check(cfg.epochs > 0 && cfg.batch_size >= 1, "fit_downstream: bad epochs/batch_size");
    nn::Classifier clf(enc.clone(), labeled.num_classes, derive_seed(cfg.seed, "probe.head"));
    const int N = labeled.size();

    if (cfg.mode == DownstreamMode::linear_probe) {
        nn::Tensor feats = encode_dataset(clf.enc, labeled, std::min(256, N));
        const int F = feats.dim(1);
        std::vector<nn::NamedTensor> params;
        clf.head.collect("head", params);
        nn::SGD opt;
        opt.momentum = 0.9;
        opt.weight_decay = 0.0;
        opt.attach(params);
        Rng rng(derive_seed(cfg.seed, "probe.perm"));
        std::vector<int> perm(N);
        for (int i = 0; i < N; ++i) perm[i] = i;
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            const double lr = nn::cosine_lr(cfg.lr, epoch, cfg.epochs);
            std::shuffle(perm.begin(), perm.end(), rng);
            for (int b0 = 0; b0 < N; b0 += cfg.batch_size) {
                const int bsz = std::min(cfg.batch_size, N - b0);
                nn::Tensor xb({bsz, F});
                std::vector<int> yb(bsz);
                for (int i = 0; i < bsz; ++i) {
                    const int r = perm[b0 + i];
                    std::copy(feats.data.begin() + static_cast<std::size_t>(r) * F,
                              feats.data.begin() + static_cast<std::size_t>(r + 1) * F,
                              xb.data.begin() + static_cast<std::size_t>(i) * F);
                    yb[i] = labeled.labels[r];
                }
                nn::zero_grads(params);
                auto ce = nn::cross_entropy(clf.head.forward(xb, true), yb);
                check(std::isfinite(ce.loss), "fit_downstream: probe loss diverged at epoch ",
                      epoch);
                clf.head.backward(ce.glogits);
                opt.step(lr);
            }
        }
        return clf;
    }

    // fine_tune: full stack
    std::vector<nn::NamedTensor> params;
    clf.collect(params);
    nn::SGD opt;
    opt.momentum = 0.9;
    opt.weight_decay = 1e-4;
    opt.attach(params);
    Rng rng(derive_seed(cfg.seed, "ft.perm"));
    std::vector<int> perm(N);
    for (int i = 0; i < N; ++i) perm[i] = i;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = nn::cosine_lr(cfg.lr, epoch, cfg.epochs);
        std::shuffle(perm.begin(), perm.end(), rng);
        for (int b0 = 0; b0 < N; b0 += cfg.batch_size) {
            const int bsz = std::min(cfg.batch_size, N - b0);
            std::vector<Image> imgs;
            std::vector<int> yb(bsz);
            imgs.reserve(bsz);
            for (int i = 0; i < bsz; ++i) {
                const int r = perm[b0 + i];
                Rng arng(derive_seed(cfg.seed, strf("ft.aug.", epoch, ".", r)));
                imgs.push_back(data::augment(labeled.images[r], cfg.aug, arng));
                yb[i] = labeled.labels[r];
            }
            nn::zero_grads(params);
            auto ce = nn::cross_entropy(clf.logits(nn::images_to_tensor(imgs), true), yb);
            check(std::isfinite(ce.loss), "fit_downstream: fine-tune loss diverged at epoch ",
                  epoch);
            clf.backward_to_input(ce.glogits);
            opt.step(lr);
        }
    }
    return clf;
}

// ---- checkpoints ---------------------------------------------------------------------

std::string encoder_config_to_json(const nn::EncoderConfig& cfg, int trunc_stage,
                                   int trunc_unit) {
    json j;
    j["kind"] = "encoder";
    j["family"] = nn::family_name(cfg.backbone.family);
    j["width_mult"] = cfg.backbone.width_mult;
    j["stem_stride"] = cfg.backbone.stem_stride;
    j["init_seed"] = cfg.backbone.init_seed;
    j["proj_dim"] = cfg.proj_dim;
    j["proj_hidden"] = cfg.proj_hidden;
    j["trunc_stage"] = trunc_stage;
    j["trunc_unit"] = trunc_unit;
    return j.dump();
}

nn::EncoderConfig encoder_config_from_json(const std::string& s, int* trunc_stage,
                                           int* trunc_unit) {
    json j = json::parse(s);
    nn::EncoderConfig cfg;
    cfg.backbone.family = nn::family_from_name(j.at("family").get<std::string>());
    cfg.backbone.width_mult = j.at("width_mult").get<double>();
    cfg.backbone.stem_stride = j.at("stem_stride").get<int>();
    cfg.backbone.init_seed = j.at("init_seed").get<std::uint64_t>();
    cfg.proj_dim = j.at("proj_dim").get<int>();
    cfg.proj_hidden = j.at("proj_hidden").get<int>();
    if (trunc_stage) *trunc_stage = j.value("trunc_stage", 0);
    if (trunc_unit) *trunc_unit = j.value("trunc_unit", 0);
    return cfg;
}

void save_encoder(const std::string& path, const nn::EncoderModel& enc) {
    std::vector<nn::NamedTensor> ts;
    const_cast<nn::EncoderModel&>(enc).collect(ts);
    save_checkpoint(path,
                    encoder_config_to_json(enc.cfg, enc.backbone.trunc_stage,
                                           enc.backbone.trunc_unit),
                    ts);
}

nn::EncoderModel load_encoder(const std::string& path) {
    const std::string cfg_json = nn::checkpoint_config(path);
    int ts = 0, tu = 0;
    nn::EncoderConfig cfg = encoder_config_from_json(cfg_json, &ts, &tu);
    nn::EncoderModel enc = (ts > 0) ? nn::truncate_encoder(nn::build_encoder(cfg), ts, tu)
                                    : nn::build_encoder(cfg);
    std::vector<nn::NamedTensor> into;
    enc.collect(into);
    nn::load_checkpoint(path, into);
    return enc;
}

void save_classifier(const std::string& path, const nn::Classifier& clf) {
    json j = json::parse(encoder_config_to_json(clf.enc.cfg, clf.enc.backbone.trunc_stage,
                                                clf.enc.backbone.trunc_unit));
    j["kind"] = "classifier";
    j["num_classes"] = clf.num_classes;
    std::vector<nn::NamedTensor> ts;
    const_cast<nn::Classifier&>(clf).collect(ts);
    // the projection head is not part of the classifier graph but belongs to
    // the embedded encoder; serialize it too so the encoder reloads whole
    const_cast<nn::Classifier&>(clf).enc.projector.collect("proj", ts);
    save_checkpoint(path, j.dump(), ts);
}

nn::Classifier load_classifier(const std::string& path) {
    const std::string cfg_json = nn::checkpoint_config(path);
    json j = json::parse(cfg_json);
    check(j.value("kind", "") == "classifier", "load_classifier: checkpoint ", path,
          " holds kind '", j.value("kind", "?"), "'");
    int ts = 0, tu = 0;
    nn::EncoderConfig cfg = encoder_config_from_json(cfg_json, &ts, &tu);
    nn::EncoderModel enc = (ts > 0) ? nn::truncate_encoder(nn::build_encoder(cfg), ts, tu)
                                    : nn::build_encoder(cfg);
    nn::Classifier clf(std::move(enc), j.at("num_classes").get<int>(), 1);
    std::vector<nn::NamedTensor> into;
    clf.collect(into);
    clf.enc.projector.collect("proj", into);
    nn::load_checkpoint(path, into);
    return clf;
}

void save_generator(const std::string& path, const nn::GeneratorNet& gen) {
    json j;
    j["kind"] = "generator";
    j["base_channels"] = gen.cfg.base_channels;
    j["amplitude"] = gen.cfg.amplitude;
    j["init_seed"] = gen.cfg.init_seed;
    std::vector<nn::NamedTensor> ts;
    const_cast<nn::GeneratorNet&>(gen).collect(ts);
    save_checkpoint(path, j.dump(), ts);
}

nn::GeneratorNet load_generator(const std::string& path) {
    json j = json::parse(nn::checkpoint_config(path));
    check(j.value("kind", "") == "generator", "load_generator: checkpoint ", path,
          " holds kind '", j.value("kind", "?"), "'");
    nn::GeneratorConfig cfg;
    cfg.base_channels = j.at("base_channels").get<int>();
    cfg.amplitude = j.at("amplitude").get<double>();
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
    nn::GeneratorNet gen = nn::build_generator(cfg);
    std::vector<nn::NamedTensor> into;
    gen.collect(into);
    nn::load_checkpoint(path, into);
    return gen;
}

}  // namespace backlab::train
