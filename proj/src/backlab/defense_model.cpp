#include "backlab/defense_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string_view>

#include "backlab/analysis.hpp"

using nlohmann::json;

namespace backlab::defense {

namespace {

json steps_json(const std::vector<PruneStep>& rows) {
    json out = json::array();
    for (const auto& r : rows)
        out.push_back({{"x", r.x}, {"pruned", r.pruned}, {"acc", r.acc}, {"asr", r.asr}});
    return out;
}

struct AdamVec {
    std::vector<double> m, v;
    int t = 0;
    explicit AdamVec(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
    void step(std::vector<double>& w, const std::vector<double>& g, double lr) {
        ++t;
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

struct ConvChannels {
    nn::Conv2d* conv = nullptr;
    nn::BatchNorm2d* bn = nullptr;  // null when no batch-norm follows
    std::vector<double> uclc;
};

std::vector<ConvChannels> uclc_layers(nn::Backbone& bb) {
    std::vector<nn::Layer*> seq;
    bb.visit([&](nn::Layer* l) { seq.push_back(l); });
    std::vector<ConvChannels> out;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (std::string_view(seq[i]->type()) != "conv2d") continue;
        ConvChannels cc;
        cc.conv = static_cast<nn::Conv2d*>(seq[i]);
        if (i + 1 < seq.size() && std::string_view(seq[i + 1]->type()) == "batchnorm2d") {
            auto* bn = static_cast<nn::BatchNorm2d*>(seq[i + 1]);
            if (bn->c == cc.conv->cout) cc.bn = bn;
        }
        const int cing = cc.conv->cin / cc.conv->groups;
        const int kk = cc.conv->k * cc.conv->k;
        cc.uclc.resize(cc.conv->cout);
        for (int oc = 0; oc < cc.conv->cout; ++oc) {
            Eigen::MatrixXd m(cing, kk);
            const float* w =
                cc.conv->W.data.data() + static_cast<std::size_t>(oc) * cing * kk;
            for (int r = 0; r < cing; ++r)
                for (int c = 0; c < kk; ++c) m(r, c) = w[r * kk + c];
            double s = spectral_norm_power(m);
            if (cc.bn)
                s *= std::abs(cc.bn->gamma.data[oc]) /
                     std::sqrt(cc.bn->running_var.data[oc] + cc.bn->eps);
            cc.uclc[oc] = s;
        }
        out.push_back(std::move(cc));
    }
    return out;
}

double dataset_accuracy(nn::Classifier& clf, const data::ImageDataset& ds) {
    const std::vector<int> p = analysis::predict(clf, ds, 256);
    int ok = 0;
    for (int i = 0; i < ds.size(); ++i) ok += p[i] == ds.labels[i] ? 1 : 0;
    return static_cast<double>(ok) / std::max(1, ds.size());
}

}  // namespace

void PruneReport::save_csv(const std::string& path) const {
    std::ofstream out(path);
    check(out.good(), "PruneReport::save_csv: cannot write ", path);
    out.precision(10);
    out << "x,pruned,acc,asr\n";
    for (const auto& r : rows)
        out << r.x << "," << r.pruned << "," << r.acc << "," << r.asr << "\n";
}

void PruneReport::save_json(const std::string& path) const {
    json j;
    j["method"] = method;
    j["params"] = params;
    j["rows"] = steps_json(rows);
    j["chosen"] = {{"x", chosen_x}, {"acc", chosen_acc}, {"asr", chosen_asr}};
    j["degenerate"] = degenerate;
    std::ofstream out(path);
    check(out.good(), "PruneReport::save_json: cannot write ", path);
    out << j.dump(2) << "\n";
}

PruneReport fine_prune(const nn::Classifier& clf, const data::ImageDataset& clean_validation,
                       int max_channels, int stride, const EvalFn& eval_fn) {
    check(clean_validation.size() > 0, "fine_prune: validation set is empty");
    check(stride >= 1, "fine_prune: stride must be >= 1");
    check(static_cast<bool>(eval_fn), "fine_prune: eval_fn required");

    nn::Classifier work = clf.clone();
    const int width = work.head.in;
    check(max_channels >= 0 && max_channels <= width, "fine_prune: max_channels ",
          max_channels, " exceeds penultimate width ", width);

    std::vector<double> act(width, 0.0);
    const int B = 256;
    for (int b0 = 0; b0 < clean_validation.size(); b0 += B) {
        const int bsz = std::min(B, clean_validation.size() - b0);
        std::vector<const Image*> imgs(bsz);
        for (int i = 0; i < bsz; ++i) imgs[i] = &clean_validation.images[b0 + i];
        nn::Tensor f = work.penultimate(nn::images_to_tensor(imgs), false);
        for (int i = 0; i < bsz; ++i)
            for (int d = 0; d < width; ++d)
                act[d] += std::abs(f.data[static_cast<std::size_t>(i) * width + d]);
    }
    for (double& a : act) a /= clean_validation.size();

    std::vector<std::pair<double, int>> order(width);
    for (int d = 0; d < width; ++d) order[d] = {act[d], d};
    std::sort(order.begin(), order.end());

    PruneReport rep;
    rep.method = "fine_prune";
    rep.params = {{"max_channels", max_channels},
                  {"stride", stride},
                  {"chosen_rule", "max acc-asr"}};
    std::vector<int> steps;
    for (int p = 0; p <= max_channels; p += stride) steps.push_back(p);
    if (steps.back() != max_channels) steps.push_back(max_channels);

    int next = 0;
    for (int p : steps) {
        while (next < p) {
            const int ch = order[next].second;
            for (int o = 0; o < work.head.out; ++o)
                work.head.W.data[static_cast<std::size_t>(o) * width + ch] = 0.0f;
            ++next;
        }
        const auto [acc, asr] = eval_fn(work);
        rep.rows.push_back({static_cast<double>(p), acc, asr, p});
    }

    const auto best = std::max_element(
        rep.rows.begin(), rep.rows.end(),
        [](const PruneStep& a, const PruneStep& b) { return a.acc - a.asr < b.acc - b.asr; });
    rep.chosen_x = best->x;
    rep.chosen_acc = best->acc;
    rep.chosen_asr = best->asr;
    return rep;
}

// ---- data-free pruning -----------------------------------------------------------------

double spectral_norm_power(const Eigen::MatrixXd& a, double tol, int max_iters) {
    check(a.rows() >= 1 && a.cols() >= 1, "spectral_norm_power: empty matrix");
    Rng rng(fnv1a64("spectral_norm") ^
            (static_cast<std::uint64_t>(a.rows()) << 32 | static_cast<std::uint64_t>(a.cols())));
    std::normal_distribution<double> nd;
    Eigen::VectorXd v(a.cols());
    for (int i = 0; i < v.size(); ++i) v(i) = nd(rng);
    if (v.norm() <= 0.0) v.setOnes();
    v /= v.norm();

    double sigma = 0.0;
    for (int it = 0; it < max_iters; ++it) {
        Eigen::VectorXd u = a * v;
        const double s = u.norm();
        if (s <= 1e-300) return 0.0;
        Eigen::VectorXd w = a.transpose() * u;
        const double wn = w.norm();
        if (wn <= 1e-300) return s;
        v = w / wn;
        if (std::abs(s - sigma) <= tol * std::max(1.0, s)) return s;
        sigma = s;
    }
    return sigma;
}

std::vector<UclcEntry> clp_uclc(nn::Backbone& bb) {
    std::vector<UclcEntry> out;
    int id = 0;
    for (const auto& layer : uclc_layers(bb)) {
        for (int oc = 0; oc < layer.conv->cout; ++oc)
            out.push_back({strf("conv", id), oc, layer.uclc[oc]});
        ++id;
    }
    return out;
}

PruneStep clp_prune(nn::Classifier& clf, double u, const EvalFn& eval_fn) {
    int pruned = 0;
    for (auto& layer : uclc_layers(clf.enc.backbone)) {
        const double mu = mean(layer.uclc);
        const double sigma = std::sqrt(variance(layer.uclc));
        const double thr = mu + u * sigma;
        for (int oc = 0; oc < layer.conv->cout; ++oc) {
            if (!(layer.uclc[oc] > thr)) continue;
            layer.conv->zero_out_channel(oc);
            if (layer.bn) layer.bn->zero_channel(oc);
            ++pruned;
        }
    }
    PruneStep step;
    step.x = u;
    step.pruned = pruned;
    if (eval_fn) {
        const auto [acc, asr] = eval_fn(clf);
        step.acc = acc;
        step.asr = asr;
    }
    return step;
}

std::vector<double> savitzky_golay(const std::vector<double>& series, int window, int order) {
    check(window >= 3 && window % 2 == 1, "savitzky_golay: window must be odd and >= 3");
    check(order >= 0 && order < window, "savitzky_golay: need window > order");
    const int n = static_cast<int>(series.size());
    check(n >= window, "savitzky_golay: series shorter than window");

    const int h = window / 2;
    Eigen::MatrixXd a(window, order + 1);
    for (int i = 0; i < window; ++i) {
        double p = 1.0;
        for (int q = 0; q <= order; ++q) {
            a(i, q) = p;
            p *= (i - h);
        }
    }
    Eigen::VectorXd e0 = Eigen::VectorXd::Zero(order + 1);
    e0(0) = 1.0;
    const Eigen::VectorXd w = a * (a.transpose() * a).ldlt().solve(e0);

    auto mirror = [&](int i) {
        if (i < 0) return -i;
        if (i >= n) return 2 * (n - 1) - i;
        return i;
    };
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < window; ++j) s += w(j) * series[mirror(i - h + j)];
        out[i] = s;
    }
    return out;
}

PruneReport clp_knee(const nn::Classifier& clf, const std::vector<double>& u_grid,
                     const EvalFn& eval_fn, const SgParams& sg) {
    check(static_cast<bool>(eval_fn), "clp_knee: eval_fn required");
    const int n = static_cast<int>(u_grid.size());
    check(n >= sg.window, "clp_knee: grid needs at least ", sg.window, " points");
    for (int i = 1; i < n; ++i)
        check(u_grid[i] > u_grid[i - 1], "clp_knee: u grid must be strictly ascending");

    PruneReport rep;
    rep.method = "clp_knee";
    rep.params = {{"u_grid", u_grid}, {"sg_window", sg.window}, {"sg_order", sg.order}};
    std::vector<double> acc;
    for (double u : u_grid) {
        nn::Classifier work = clf.clone();
        rep.rows.push_back(clp_prune(work, u, eval_fn));
        acc.push_back(rep.rows.back().acc);
    }

    const std::vector<double> smooth = savitzky_golay(acc, sg.window, sg.order);
    double best = -1.0;
    int knee = n / 2;
    for (int i = 1; i + 1 < n; ++i) {
        const double d2 = std::abs(smooth[i + 1] - 2.0 * smooth[i] + smooth[i - 1]);
        if (d2 > best) {
            best = d2;
            knee = i;
        }
    }
    if (best <= 1e-9) {
        rep.degenerate = true;
        knee = n / 2;
    }
    rep.chosen_x = u_grid[knee];
    rep.chosen_acc = rep.rows[knee].acc;
    rep.chosen_asr = rep.rows[knee].asr;
    return rep;
}

nn::Classifier clp_apply(const nn::Classifier& clf, double u) {
    nn::Classifier work = clf.clone();
    clp_prune(work, u, EvalFn());
    return work;
}

// ---- trigger reverse engineering -----------------------------------------------------------

std::vector<double> nc_anomaly_indices(const std::vector<double>& norms) {
    check(!norms.empty(), "nc_anomaly_indices: empty norm list");
    const double med = median(norms);
    const double md = mad(norms);
    std::vector<double> out(norms.size());
    for (std::size_t i = 0; i < norms.size(); ++i) out[i] = robust_index(norms[i], med, md);
    return out;
}

NCResult neural_cleanse(nn::Classifier& clf, const data::ImageDataset& sample_pool,
                        const NCParams& params) {
    sample_pool.validate();
    check(sample_pool.size() > 0, "neural_cleanse: empty sample pool");
    check(params.steps >= 1 && params.batch >= 1, "neural_cleanse: invalid budget");
    const int C = clf.num_classes;
    const int h = sample_pool.images[0].h, w = sample_pool.images[0].w,
              ch = sample_pool.images[0].c;
    const int hw = h * w, hwc = h * w * ch;

    std::vector<nn::NamedTensor> ps;
    clf.collect(ps);

    NCResult res;
    for (int t = 0; t < C; ++t) {
        std::vector<int> rows;
        for (int i = 0; i < sample_pool.size(); ++i)
            if (sample_pool.labels[i] != t) rows.push_back(i);
        check(!rows.empty(), "neural_cleanse: sample pool has no rows outside class ", t);
        Rng rng(derive_seed(params.seed, strf("nc.", t)));
        std::shuffle(rows.begin(), rows.end(), rng);

        std::vector<double> wm(hw, std::atanh(2.0 * 0.1 - 1.0));  // mask starts near 0.1
        std::vector<double> wp(hwc, 0.0);                         // pattern starts at 0.5
        std::vector<double> m(hw), delta(hwc), gm(hw), gp(hwc);
        AdamVec am(hw), ap(hwc);
        double lambda = params.lambda_init;
        bool diverged = false;
        std::size_t cursor = 0;
        const int bsz = std::min<int>(params.batch, static_cast<int>(rows.size()));

        for (int step = 0; step < params.steps; ++step) {
            for (int j = 0; j < hw; ++j) m[j] = 0.5 * (std::tanh(wm[j]) + 1.0);
            for (int j = 0; j < hwc; ++j) delta[j] = 0.5 * (std::tanh(wp[j]) + 1.0);

            std::vector<int> batch(bsz);
            for (int i = 0; i < bsz; ++i) {
                batch[i] = rows[cursor];
                cursor = (cursor + 1) % rows.size();
            }
            std::vector<Image> blended(bsz);
            for (int i = 0; i < bsz; ++i) {
                const Image& x = sample_pool.images[batch[i]];
                Image b = x;
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) {
                        const double mv = m[y * w + xx];
                        for (int c = 0; c < ch; ++c)
                            b.at(y, xx, c) = (1.0 - mv) * x.at(y, xx, c) +
                                             mv * delta[(y * w + xx) * ch + c];
                    }
                blended[i] = std::move(b);
            }
            std::vector<const Image*> ptrs(bsz);
            for (int i = 0; i < bsz; ++i) ptrs[i] = &blended[i];
            nn::Tensor logits = clf.logits(nn::images_to_tensor(ptrs), false);
            nn::CEResult ce = nn::cross_entropy(logits, std::vector<int>(bsz, t), true);
            double l1 = 0.0;
            for (double v : m) l1 += v;
            if (!std::isfinite(ce.loss + lambda * l1)) {
                diverged = true;
                break;
            }
            nn::zero_grads(ps);
            nn::Tensor gx = clf.backward_to_input(ce.glogits);

            std::fill(gm.begin(), gm.end(), lambda);
            std::fill(gp.begin(), gp.end(), 0.0);
            for (int i = 0; i < bsz; ++i) {
                const Image& x = sample_pool.images[batch[i]];
                const float* g = gx.data.data() + static_cast<std::size_t>(i) * hwc;
                for (int c = 0; c < ch; ++c)
                    for (int y = 0; y < h; ++y)
                        for (int xx = 0; xx < w; ++xx) {
                            const double gv = g[(c * h + y) * w + xx];
                            const int pix = y * w + xx;
                            gm[pix] += gv * (delta[pix * ch + c] - x.at(y, xx, c));
                            gp[pix * ch + c] += gv * m[pix];
                        }
            }
            for (int j = 0; j < hw; ++j) {
                const double th = 2.0 * m[j] - 1.0;
                gm[j] *= 0.5 * (1.0 - th * th);
            }
            for (int j = 0; j < hwc; ++j) {
                const double th = 2.0 * delta[j] - 1.0;
                gp[j] *= 0.5 * (1.0 - th * th);
            }
            am.step(wm, gm, params.lr);
            ap.step(wp, gp, params.lr);

            int hits = 0;
            for (int i = 0; i < bsz; ++i) hits += ce.predictions[i] == t ? 1 : 0;
            const double success = static_cast<double>(hits) / bsz;
            lambda = success > params.success_target ? lambda * 2.0 : lambda * 0.5;
            lambda = std::min(1e6, std::max(1e-8, lambda));
        }

        NCClassResult r;
        r.cls = t;
        r.diverged = diverged;
        for (int j = 0; j < hw; ++j) m[j] = 0.5 * (std::tanh(wm[j]) + 1.0);
        for (int j = 0; j < hwc; ++j) delta[j] = 0.5 * (std::tanh(wp[j]) + 1.0);
        for (double v : m) r.mask_l1 += v;
        r.mask = Image(h, w, 1);
        r.mask.v = m;
        r.pattern = Image(h, w, ch);
        r.pattern.v = delta;
        res.classes.push_back(std::move(r));
    }

    std::vector<double> norms;
    for (const auto& r : res.classes)
        if (!r.diverged) norms.push_back(r.mask_l1);
    if (!norms.empty()) {
        res.median_l1 = median(norms);
        res.mad_l1 = mad(norms);
        for (auto& r : res.classes) {
            if (r.diverged) continue;
            r.anomaly = robust_index(r.mask_l1, res.median_l1, res.mad_l1);
            r.flagged = r.anomaly > params.anomaly_threshold && r.mask_l1 < res.median_l1;
            if (r.flagged) res.flagged.push_back(r.cls);
        }
    }
    return res;
}

void NCResult::save(const std::string& dir) const {
    json j;
    j["median_l1"] = median_l1;
    j["mad_l1"] = mad_l1;
    j["mad_scale"] = mad_scale;
    j["flagged"] = flagged;
    json per = json::array();
    for (const auto& r : classes) {
        per.push_back({{"class", r.cls},
                       {"mask_l1", r.mask_l1},
                       {"anomaly", r.anomaly},
                       {"flagged", r.flagged},
                       {"diverged", r.diverged}});
        write_png(strf(dir, "/nc_mask_", r.cls, ".png"), r.mask);
        write_png(strf(dir, "/nc_pattern_", r.cls, ".png"), r.pattern);
    }
    j["classes"] = per;
    std::ofstream out(dir + "/nc.json");
    check(out.good(), "NCResult::save: cannot write ", dir, "/nc.json");
    out << j.dump(2) << "\n";
}

// ---- fine-tuning ---------------------------------------------------------------------------

FtOutcome fine_tune_defense(const nn::EncoderModel& enc, const data::ImageDataset& train_b,
                            const data::ImageDataset& test_b,
                            const data::ImageDataset* triggered_test_b,
                            const train::DownstreamConfig& cfg) {
    nn::Classifier clf = train::fit_downstream(enc, train_b, cfg);
    FtOutcome o;
    o.clean_acc = dataset_accuracy(clf, test_b);
    o.triggered_acc = triggered_test_b ? dataset_accuracy(clf, *triggered_test_b) : o.clean_acc;
    o.drop = o.clean_acc - o.triggered_acc;
    return o;
}

// ---- ensemble --------------------------------------------------------------------------------

void EnsembleOutcome::save_json(const std::string& path) const {
    json j;
    j["pre"] = {{"acc", pre_acc}, {"asr", pre_asr}};
    j["retrain"] = {{"acc", retrain_acc}, {"asr", retrain_asr}};
    j["final"] = {{"acc", final_acc}, {"asr", final_asr}};
    json fr;
    fr["flagged_count"] = filter_report.flagged.size();
    fr["rows"] = json::array();
    for (const auto& r : filter_report.rows)
        fr["rows"].push_back({{"threshold", r.threshold}, {"tpr", r.tpr}, {"fpr", r.fpr}});
    fr["aux"] = filter_report.aux;
    j["filter"] = fr;
    j["prune"] = {{"chosen_u", prune_report.chosen_x},
                  {"degenerate", prune_report.degenerate},
                  {"rows", steps_json(prune_report.rows)}};
    std::ofstream out(path);
    check(out.good(), "EnsembleOutcome::save_json: cannot write ", path);
    out << j.dump(2) << "\n";
}

EnsembleOutcome ensemble_defense(const analysis::FeatureBank& bank,
                                 const std::vector<bool>& truth,
                                 std::pair<double, double> pre_eval, const RetrainFn& retrain,
                                 const EvalFn& eval_fn, const EnsembleParams& params) {
    check(static_cast<bool>(retrain) && static_cast<bool>(eval_fn), "ensemble_defense: retrain and eval callbacks required");
    EnsembleOutcome o;
    o.pre_acc = pre_eval.first;
    o.pre_asr = pre_eval.second;

    try {
        o.filter_report = density_filter(bank, truth, params.filter);
    } catch (const std::exception& e) {
        throw error(strf("ensemble stage density_filter: ", e.what()));
    }

    std::vector<char> drop(bank.n, 0);
    for (int i : o.filter_report.flagged) drop[i] = 1;
    std::vector<int> keep;
    for (int i = 0; i < bank.n; ++i)
        if (!drop[i]) keep.push_back(i);
    check(!keep.empty(), "ensemble_defense: filter removed every training row");

    std::optional<nn::Classifier> clf;
    try {
        clf.emplace(retrain(keep));
        const auto [acc, asr] = eval_fn(*clf);
        o.retrain_acc = acc;
        o.retrain_asr = asr;
    } catch (const std::exception& e) {
        throw error(strf("ensemble stage retrain: ", e.what()));
    }

    try {
        o.prune_report = clp_knee(*clf, params.u_grid, eval_fn, params.sg);
        o.final_acc = o.prune_report.chosen_acc;
        o.final_asr = o.prune_report.chosen_asr;
    } catch (const std::exception& e) {
        throw error(strf("ensemble stage clp_knee: ", e.what()));
    }
    return o;
}

}  // namespace backlab::defense
