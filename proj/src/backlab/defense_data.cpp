#include "backlab/defense_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>

using nlohmann::json;
using backlab::analysis::FeatureBank;
using backlab::analysis::row_distance;

namespace backlab::defense {

namespace {

std::vector<double> softmax_row(const float* row, int n) {
    double m = row[0];
    for (int i = 1; i < n; ++i) m = std::max(m, static_cast<double>(row[i]));
    std::vector<double> p(n);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
        p[i] = std::exp(row[i] - m);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

Eigen::MatrixXd rows_matrix(const FeatureBank& bank, const std::vector<int>& rows) {
    Eigen::MatrixXd x(rows.size(), bank.d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const float* r = bank.row(rows[i]);
        for (int d = 0; d < bank.d; ++d) x(static_cast<int>(i), d) = r[d];
    }
    return x;
}

}  // namespace

void DefenseReport::save_json(const std::string& path) const {
    json j;
    j["defense"] = defense;
    j["params"] = params;
    json rr = json::array();
    for (const auto& r : rows)
        rr.push_back({{"threshold", r.threshold}, {"tpr", r.tpr}, {"fpr", r.fpr}});
    j["rows"] = rr;
    j["flagged"] = flagged;
    j["aux"] = aux;
    std::ofstream out(path);
    check(out.good(), "DefenseReport::save_json: cannot write ", path);
    out << j.dump(2) << "\n";
}

DefenseReport DefenseReport::load_json(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "DefenseReport::load_json: cannot read ", path);
    json j = json::parse(in);
    DefenseReport r;
    r.defense = j.at("defense").get<std::string>();
    r.params = j.at("params");
    for (const auto& row : j.at("rows"))
        r.rows.push_back({row.at("threshold").get<double>(), row.at("tpr").get<double>(),
                          row.at("fpr").get<double>()});
    r.flagged = j.at("flagged").get<std::vector<int>>();
    r.aux = j.at("aux");
    return r;
}

ReportRow rates_at(const std::vector<int>& flagged, const std::vector<bool>& truth,
                   double threshold) {
    const int n = static_cast<int>(truth.size());
    int pos = 0;
    for (bool t : truth) pos += t ? 1 : 0;
    int hit = 0, fa = 0;
    for (int i : flagged) {
        check(i >= 0 && i < n, "rates_at: flagged index ", i, " outside [0,", n, ")");
        (truth[i] ? hit : fa) += 1;
    }
    ReportRow r;
    r.threshold = threshold;
    r.tpr = pos > 0 ? static_cast<double>(hit) / pos : 0.0;
    r.fpr = (n - pos) > 0 ? static_cast<double>(fa) / (n - pos) : 0.0;
    return r;
}

// ---- loss-based isolation ----------------------------------------------------------

DefenseReport abl_isolate(const train::DynamicsLog& log, const std::vector<bool>& truth,
                          const AblParams& params) {
    check(!log.per_sample.empty(),
          "abl_isolate: dynamics log carries no per-sample loss traces; rerun training "
          "with per-sample logging enabled");
    const int E = static_cast<int>(log.per_sample.size());
    const int N = static_cast<int>(log.per_sample[0].size());
    for (const auto& row : log.per_sample)
        check(static_cast<int>(row.size()) == N, "abl_isolate: ragged per-sample trace");
    check(static_cast<int>(truth.size()) == N, "abl_isolate: ground truth size ",
          truth.size(), " != trace width ", N);
    check(params.isolation_rate > 0.0 && params.isolation_rate < 1.0,
          "abl_isolate: isolation rate must lie in (0,1)");

    const int early = std::min(params.early_epochs, E);
    std::vector<std::pair<double, int>> order(N);
    for (int i = 0; i < N; ++i) {
        double s = 0.0;
        for (int e = 0; e < early; ++e) s += log.per_sample[e][i];
        order[i] = {s / early, i};
    }
    std::sort(order.begin(), order.end());

    auto prefix_flags = [&](double rate) {
        const int m = std::min(N, std::max(1, static_cast<int>(std::ceil(rate * N - 1e-9))));
        std::vector<int> f(m);
        for (int i = 0; i < m; ++i) f[i] = order[i].second;
        std::sort(f.begin(), f.end());
        return f;
    };

    DefenseReport rep;
    rep.defense = "abl_isolate";
    rep.params = {{"rate_grid", params.rate_grid},
                  {"isolation_rate", params.isolation_rate},
                  {"early_epochs", early}};
    for (double r : params.rate_grid) {
        check(r > 0.0 && r < 1.0, "abl_isolate: grid rate ", r, " outside (0,1)");
        rep.rows.push_back(rates_at(prefix_flags(r), truth, r));
    }
    rep.flagged = prefix_flags(params.isolation_rate);
    rep.aux = {{"n", N}, {"epochs_logged", E}};
    return rep;
}

double abl_gamma(double loss_init, double loss_final, double ratio) {
    check(ratio >= 0.0 && ratio <= 1.0, "abl_gamma: ratio must lie in [0,1]");
    return loss_init - ratio * (loss_init - loss_final);
}

void abl_unlearn(nn::Classifier& clf, const data::ImageDataset& ds,
                 const std::vector<int>& flagged, double gamma, int epochs, double lr,
                 std::uint64_t seed) {
    check(epochs >= 1 && lr > 0.0, "abl_unlearn: need epochs >= 1 and lr > 0");
    if (flagged.empty()) return;
    for (int i : flagged)
        check(i >= 0 && i < ds.size(), "abl_unlearn: flagged index ", i, " out of range");

    std::vector<nn::NamedTensor> ps;
    clf.collect(ps);
    nn::SGD opt;
    opt.momentum = 0.0;
    opt.weight_decay = 0.0;
    opt.attach(ps);

    const int B = 64;
    std::vector<int> idx = flagged;
    for (int e = 0; e < epochs; ++e) {
        Rng rng(derive_seed(seed, strf("unlearn.", e)));
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t b0 = 0; b0 < idx.size(); b0 += B) {
            const int bsz = static_cast<int>(std::min<std::size_t>(B, idx.size() - b0));
            std::vector<const Image*> imgs(bsz);
            std::vector<int> labels(bsz);
            for (int i = 0; i < bsz; ++i) {
                imgs[i] = &ds.images[idx[b0 + i]];
                labels[i] = ds.labels[idx[b0 + i]];
            }
            nn::Tensor logits = clf.logits(nn::images_to_tensor(imgs), true);
            nn::CEResult ce = nn::cross_entropy(logits, labels, true);
            const int K = logits.dim(1);
            bool any = false;
            for (int i = 0; i < bsz; ++i) {
                // ascend only while the sample's loss is still below gamma
                const float f = ce.per_sample[i] < gamma ? -1.0f : 0.0f;
                any = any || f != 0.0f;
                for (int c = 0; c < K; ++c)
                    ce.glogits.data[static_cast<std::size_t>(i) * K + c] *= f;
            }
            if (!any) continue;
            nn::zero_grads(ps);
            clf.backward_to_input(ce.glogits);
            opt.step(lr);
        }
    }
}

// ---- activation clustering -----------------------------------------------------------

Eigen::MatrixXd pca_project(const Eigen::MatrixXd& x, int dim) {
    check(x.rows() >= 2, "pca_project: need at least 2 rows");
    check(dim >= 1, "pca_project: dim must be >= 1");
    Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
    Eigen::BDCSVD<Eigen::MatrixXd> svd(xc, Eigen::ComputeThinV);
    Eigen::MatrixXd v = svd.matrixV();
    const int keep = std::min<int>(dim, static_cast<int>(v.cols()));
    Eigen::MatrixXd vk = v.leftCols(keep);
    for (int c = 0; c < keep; ++c) {
        int arg = 0;
        vk.col(c).cwiseAbs().maxCoeff(&arg);
        if (vk(arg, c) < 0) vk.col(c) = -vk.col(c);
    }
    return xc * vk;
}

std::vector<int> kmeans2(const Eigen::MatrixXd& x, int iters, Rng& rng) {
    const int n = static_cast<int>(x.rows());
    check(n >= 2, "kmeans2: need at least 2 points");

    // kmeans++ seeding
    Eigen::MatrixXd centers(2, x.cols());
    const int c0 = static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(rng));
    centers.row(0) = x.row(c0);
    Eigen::VectorXd d2(n);
    for (int i = 0; i < n; ++i) d2(i) = (x.row(i) - centers.row(0)).squaredNorm();
    const double total = d2.sum();
    int c1 = (c0 + 1) % n;
    if (total > 0.0) {
        double u = std::uniform_real_distribution<double>(0.0, total)(rng);
        for (int i = 0; i < n; ++i) {
            u -= d2(i);
            if (u <= 0.0) {
                c1 = i;
                break;
            }
        }
    }
    centers.row(1) = x.row(c1);

    std::vector<int> assign(n, 0), prev(n, -1);
    for (int it = 0; it < iters && assign != prev; ++it) {
        prev = assign;
        for (int i = 0; i < n; ++i) {
            const double a = (x.row(i) - centers.row(0)).squaredNorm();
            const double b = (x.row(i) - centers.row(1)).squaredNorm();
            assign[i] = b < a ? 1 : 0;
        }
        for (int k = 0; k < 2; ++k) {
            Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(x.cols());
            int cnt = 0;
            for (int i = 0; i < n; ++i)
                if (assign[i] == k) {
                    acc += x.row(i);
                    ++cnt;
                }
            if (cnt == 0) {
                // move the point farthest from the other center into the empty cluster
                int far = 0;
                double best = -1.0;
                for (int i = 0; i < n; ++i) {
                    const double d = (x.row(i) - centers.row(1 - k)).squaredNorm();
                    if (d > best) {
                        best = d;
                        far = i;
                    }
                }
                assign[far] = k;
                centers.row(k) = x.row(far);
            } else {
                centers.row(k) = acc / cnt;
            }
        }
    }
    return assign;
}

double silhouette_score(const Eigen::MatrixXd& x, const std::vector<int>& assign) {
    const int n = static_cast<int>(x.rows());
    check(static_cast<int>(assign.size()) == n, "silhouette_score: assignment size mismatch");
    std::vector<int> ids = assign;
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    check(ids.size() >= 2, "silhouette_score: need at least 2 clusters");

    std::vector<int> pos(n);  // position of each point's cluster in ids
    std::vector<int> size(ids.size(), 0);
    for (int i = 0; i < n; ++i) {
        pos[i] = static_cast<int>(std::lower_bound(ids.begin(), ids.end(), assign[i]) -
                                  ids.begin());
        ++size[pos[i]];
    }

    double acc = 0.0;
    std::vector<double> mean_to(ids.size());
    for (int i = 0; i < n; ++i) {
        std::fill(mean_to.begin(), mean_to.end(), 0.0);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            mean_to[pos[j]] += (x.row(i) - x.row(j)).norm();
        }
        if (size[pos[i]] <= 1) continue;  // singleton: s(i) = 0
        const double a = mean_to[pos[i]] / (size[pos[i]] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (static_cast<int>(k) == pos[i] || size[k] == 0) continue;
            b = std::min(b, mean_to[k] / size[k]);
        }
        const double m = std::max(a, b);
        acc += m > 0.0 ? (b - a) / m : 0.0;
    }
    return acc / n;
}

DefenseReport activation_clustering(const FeatureBank& bank, const std::vector<bool>& truth,
                                    const ACParams& params) {
    bank.validate();
    check(static_cast<int>(truth.size()) == bank.n, "activation_clustering: truth size mismatch");
    check(params.pca_dim >= 1, "activation_clustering: pca_dim must be >= 1");

    const int C = bank.num_classes;
    std::vector<double> sils(C);
    std::vector<std::vector<int>> smaller_members(C);
    json sizes = json::array();
    for (int c = 0; c < C; ++c) {
        std::vector<int> idx;
        for (int i = 0; i < bank.n; ++i)
            if (bank.labels[i] == c) idx.push_back(i);
        check(idx.size() >= 2, "activation_clustering: class ", c, " has ", idx.size(),
              " samples; need at least 2");
        Eigen::MatrixXd x = rows_matrix(bank, idx);
        Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
        check(xc.cwiseAbs().maxCoeff() > 1e-12, "activation_clustering: class ", c,
              " is degenerate (identical activations)");
        Eigen::MatrixXd p = pca_project(x, params.pca_dim);
        Rng rng(derive_seed(params.seed, strf("ac.", c)));
        std::vector<int> assign = kmeans2(p, params.kmeans_iters, rng);
        sils[c] = silhouette_score(p, assign);
        int n1 = 0;
        for (int a : assign) n1 += a;
        const int n0 = static_cast<int>(assign.size()) - n1;
        const int small = n1 < n0 ? 1 : 0;
        for (std::size_t i = 0; i < idx.size(); ++i)
            if (assign[i] == small) smaller_members[c].push_back(idx[i]);
        sizes.push_back({n0, n1});
    }

    const int suspect =
        static_cast<int>(std::max_element(sils.begin(), sils.end()) - sils.begin());
    DefenseReport rep;
    rep.defense = "activation_clustering";
    rep.params = {{"pca_dim", params.pca_dim}, {"seed", params.seed}};
    rep.flagged = smaller_members[suspect];
    std::sort(rep.flagged.begin(), rep.flagged.end());
    rep.rows.push_back(rates_at(rep.flagged, truth, sils[suspect]));
    rep.aux = {{"silhouette", sils}, {"cluster_sizes", sizes}, {"suspected_class", suspect}};
    return rep;
}

// ---- mixture test ------------------------------------------------------------------------

DefenseReport scan_lite(const FeatureBank& bank, const FeatureBank& reference,
                        const std::vector<bool>& truth, const ScanParams& params) {
    bank.validate();
    reference.validate();
    check(bank.d == reference.d, "scan_lite: feature dims differ");
    check(static_cast<int>(truth.size()) == bank.n, "scan_lite: truth size mismatch");
    const int C = bank.num_classes;
    const int d = bank.d;

    // shared within-class covariance from the clean reference set
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    {
        std::vector<std::vector<int>> by_class(reference.num_classes);
        for (int i = 0; i < reference.n; ++i) by_class[reference.labels[i]].push_back(i);
        for (const auto& rows : by_class) {
            if (rows.empty()) continue;
            Eigen::MatrixXd x = rows_matrix(reference, rows);
            Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
            cov += xc.transpose() * xc;
        }
        cov /= static_cast<double>(reference.n);
        cov += params.cov_reg * Eigen::MatrixXd::Identity(d, d);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    check(llt.info() == Eigen::Success,
          "scan_lite: covariance not positive definite even after regularization");
    auto mah = [&](const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& mu) {
        Eigen::VectorXd v = (x - mu).transpose();
        return v.dot(llt.solve(v));
    };

    std::vector<double> stat(C, 0.0);
    std::vector<double> score(bank.n, 0.0);  // minority posterior, filled per class
    std::vector<std::array<double, 2>> weights(C, {1.0, 0.0});
    std::vector<std::vector<int>> class_rows(C);
    std::vector<std::vector<double>> class_post(C);
    for (int c = 0; c < C; ++c) {
        auto& idx = class_rows[c];
        for (int i = 0; i < bank.n; ++i)
            if (bank.labels[i] == c) idx.push_back(i);
        const int n = static_cast<int>(idx.size());
        if (n < 4) continue;  // too small for a meaningful mixture fit
        Eigen::MatrixXd x = rows_matrix(bank, idx);

        Eigen::RowVectorXd mu0 = x.colwise().mean();
        double ll0 = 0.0;
        for (int i = 0; i < n; ++i) ll0 -= 0.5 * mah(x.row(i), mu0);

        // initialize the two-mean split along the class's first principal axis
        Eigen::MatrixXd xc = x.rowwise() - mu0;
        if (xc.cwiseAbs().maxCoeff() <= 1e-12) continue;  // identical rows: stat stays 0
        Eigen::VectorXd proj = pca_project(x, 1).col(0);
        std::vector<int> ord(n);
        std::iota(ord.begin(), ord.end(), 0);
        std::sort(ord.begin(), ord.end(),
                  [&](int a, int b) { return std::make_pair(proj(a), a) < std::make_pair(proj(b), b); });
        Eigen::MatrixXd r(n, 2);
        for (int i = 0; i < n; ++i) {
            const bool low = i < n / 2;
            r(ord[i], 0) = low ? 1.0 : 0.0;
            r(ord[i], 1) = low ? 0.0 : 1.0;
        }

        double ll1 = -std::numeric_limits<double>::infinity();
        Eigen::MatrixXd mu(2, d);
        Eigen::Vector2d w;
        for (int it = 0; it < params.em_iters; ++it) {
            Eigen::Vector2d nk = r.colwise().sum().cwiseMax(1e-8);
            w = nk / n;
            mu = r.transpose() * x;
            mu.row(0) /= nk(0);
            mu.row(1) /= nk(1);
            double ll = 0.0;
            for (int i = 0; i < n; ++i) {
                const double a0 = std::log(std::max(w(0), 1e-300)) - 0.5 * mah(x.row(i), mu.row(0));
                const double a1 = std::log(std::max(w(1), 1e-300)) - 0.5 * mah(x.row(i), mu.row(1));
                const double m = std::max(a0, a1);
                const double l = m + std::log(std::exp(a0 - m) + std::exp(a1 - m));
                r(i, 0) = std::exp(a0 - l);
                r(i, 1) = 1.0 - r(i, 0);
                ll += l;
            }
            if (std::abs(ll - ll1) < 1e-9 * (1.0 + std::abs(ll))) {
                ll1 = ll;
                break;
            }
            ll1 = ll;
        }

        stat[c] = std::max(0.0, 2.0 * (ll1 - ll0));
        weights[c] = {w(0), w(1)};
        const int minority = w(0) <= w(1) ? 0 : 1;
        class_post[c].resize(n);
        for (int i = 0; i < n; ++i) class_post[c][i] = r(i, minority);
    }

    const double med = median(stat);
    const double md = mad(stat);
    std::vector<double> anomaly(C);
    std::vector<int> flagged_classes;
    for (int c = 0; c < C; ++c) {
        anomaly[c] = robust_index(stat[c], med, md);
        if (anomaly[c] > params.class_threshold && stat[c] > med) flagged_classes.push_back(c);
    }

    DefenseReport rep;
    rep.defense = "scan_lite";
    rep.params = {{"cov_reg", params.cov_reg},
                  {"em_iters", params.em_iters},
                  {"class_threshold", params.class_threshold},
                  {"fpr_grid", params.fpr_grid}};
    for (int c : flagged_classes)
        for (std::size_t i = 0; i < class_rows[c].size(); ++i) {
            score[class_rows[c][i]] = class_post[c][i];
            if (class_post[c][i] > 0.5) rep.flagged.push_back(class_rows[c][i]);
        }
    std::sort(rep.flagged.begin(), rep.flagged.end());

    std::vector<double> clean_scores;
    for (int i = 0; i < bank.n; ++i)
        if (!truth[i]) clean_scores.push_back(score[i]);
    std::sort(clean_scores.begin(), clean_scores.end(), std::greater<double>());
    for (double target_fpr : params.fpr_grid) {
        double thr = 1.0;
        if (!clean_scores.empty()) {
            const int q = std::min<int>(static_cast<int>(clean_scores.size()) - 1,
                                        static_cast<int>(std::floor(target_fpr * clean_scores.size())));
            thr = clean_scores[q];
        }
        std::vector<int> f;
        for (int i = 0; i < bank.n; ++i)
            if (score[i] > thr) f.push_back(i);
        rep.rows.push_back(rates_at(f, truth, thr));
    }
    rep.aux = {{"statistic", stat},
               {"anomaly_index", anomaly},
               {"flagged_classes", flagged_classes},
               {"weights", weights},
               {"statistic_median", med}};
    return rep;
}

// ---- perturbation entropy -------------------------------------------------------------

double shannon_entropy_bits(const std::vector<double>& probs) {
    double h = 0.0;
    for (double p : probs) {
        check(p >= -1e-12, "shannon_entropy_bits: negative probability");
        if (p > 0.0) h -= p * std::log2(p);
    }
    return h;
}

std::vector<double> strip_entropies(nn::Classifier& clf, const std::vector<Image>& inputs,
                                    const std::vector<Image>& overlays,
                                    const StripParams& params) {
    check(!overlays.empty(), "strip_entropies: overlay set is empty");
    check(params.n_overlays >= 1, "strip_entropies: n_overlays must be >= 1");
    check(params.alpha > 0.0 && params.alpha < 1.0, "strip_entropies: alpha must lie in (0,1)");

    Rng rng(params.seed);
    std::uniform_int_distribution<std::size_t> pick(0, overlays.size() - 1);
    std::vector<double> entropies;
    entropies.reserve(inputs.size());
    std::vector<Image> blends;
    for (const Image& x : inputs) {
        blends.clear();
        for (int o = 0; o < params.n_overlays; ++o) {
            const Image& ov = overlays[pick(rng)];
            check(ov.h == x.h && ov.w == x.w && ov.c == x.c,
                  "strip_entropies: overlay and input dimensions differ");
            Image b = x;
            for (std::size_t v = 0; v < b.v.size(); ++v)
                b.v[v] = params.alpha * x.v[v] + (1.0 - params.alpha) * ov.v[v];
            blends.push_back(std::move(b));
        }
        double acc = 0.0;
        for (int b0 = 0; b0 < params.n_overlays; b0 += params.batch) {
            const int bsz = std::min(params.batch, params.n_overlays - b0);
            std::vector<const Image*> ptrs(bsz);
            for (int i = 0; i < bsz; ++i) ptrs[i] = &blends[b0 + i];
            nn::Tensor logits = clf.logits(nn::images_to_tensor(ptrs), false);
            const int K = logits.dim(1);
            for (int i = 0; i < bsz; ++i)
                acc += shannon_entropy_bits(
                    softmax_row(logits.data.data() + static_cast<std::size_t>(i) * K, K));
        }
        entropies.push_back(acc / params.n_overlays);
    }
    return entropies;
}

DefenseReport strip_detect(nn::Classifier& clf, const data::ImageDataset& inputs,
                           const std::vector<bool>& truth,
                           const data::ImageDataset& overlay_set,
                           const data::ImageDataset& clean_validation,
                           const StripParams& params) {
    check(static_cast<int>(truth.size()) == inputs.size(), "strip_detect: truth size mismatch");
    check(clean_validation.size() > 0, "strip_detect: empty calibration set");

    const std::vector<double> e_in = strip_entropies(clf, inputs.images, overlay_set.images, params);
    StripParams calib = params;
    calib.seed = derive_seed(params.seed, "strip.calibration");
    std::vector<double> e_val =
        strip_entropies(clf, clean_validation.images, overlay_set.images, calib);
    std::sort(e_val.begin(), e_val.end());

    DefenseReport rep;
    rep.defense = "strip";
    rep.params = {{"n_overlays", params.n_overlays},
                  {"alpha", params.alpha},
                  {"fpr_grid", params.fpr_grid},
                  {"entropy_unit", "bits"}};
    std::vector<std::vector<int>> flag_sets;
    for (double target_fpr : params.fpr_grid) {
        const int m = static_cast<int>(e_val.size());
        const int q = std::min(m - 1, std::max(0, static_cast<int>(std::lround(target_fpr * m))));
        const double thr = e_val[q];
        std::vector<int> f;
        for (int i = 0; i < inputs.size(); ++i)
            if (e_in[i] < thr) f.push_back(i);
        rep.rows.push_back(rates_at(f, truth, thr));
        flag_sets.push_back(std::move(f));
    }
    const int op = std::min<int>(params.operating_row, static_cast<int>(flag_sets.size()) - 1);
    rep.flagged = flag_sets[std::max(0, op)];

    double mean_clean = 0.0, mean_poison = 0.0;
    int nc = 0, np = 0;
    for (int i = 0; i < inputs.size(); ++i) {
        if (truth[i]) {
            mean_poison += e_in[i];
            ++np;
        } else {
            mean_clean += e_in[i];
            ++nc;
        }
    }
    rep.aux = {{"mean_entropy_clean", nc ? mean_clean / nc : 0.0},
               {"mean_entropy_poison", np ? mean_poison / np : 0.0},
               {"calibration_n", e_val.size()}};
    return rep;
}

// ---- confidence filter ---------------------------------------------------------------------

std::vector<double> confidence_scores(nn::Classifier& clf, const data::ImageDataset& ds,
                                      int batch) {
    std::vector<double> conf(ds.size());
    for (int b0 = 0; b0 < ds.size(); b0 += batch) {
        const int bsz = std::min(batch, ds.size() - b0);
        std::vector<const Image*> imgs(bsz);
        for (int i = 0; i < bsz; ++i) imgs[i] = &ds.images[b0 + i];
        nn::Tensor logits = clf.logits(nn::images_to_tensor(imgs), false);
        const int K = logits.dim(1);
        for (int i = 0; i < bsz; ++i) {
            const std::vector<double> p =
                softmax_row(logits.data.data() + static_cast<std::size_t>(i) * K, K);
            conf[b0 + i] = *std::max_element(p.begin(), p.end());
        }
    }
    return conf;
}

DefenseReport bdd_confidence_filter(nn::Classifier& clf, const data::ImageDataset& train_inputs,
                                    const std::vector<bool>& truth, int target_class,
                                    const BddParams& params) {
    check(static_cast<int>(truth.size()) == train_inputs.size(),
          "bdd_confidence_filter: truth size mismatch");
    const std::vector<double> conf = confidence_scores(clf, train_inputs, params.batch);

    double thr = params.threshold;
    if (params.use_percentile) {
        check(params.percentile > 0.0 && params.percentile < 1.0,
              "bdd_confidence_filter: percentile must lie in (0,1)");
        std::vector<double> s = conf;
        std::sort(s.begin(), s.end());
        thr = s[std::min<std::size_t>(s.size() - 1,
                                      static_cast<std::size_t>(params.percentile * s.size()))];
    }

    auto flags_below = [&](double t) {
        std::vector<int> f;
        for (std::size_t i = 0; i < conf.size(); ++i)
            if (conf[i] < t) f.push_back(static_cast<int>(i));
        return f;
    };

    DefenseReport rep;
    rep.defense = "bdd_confidence_filter";
    rep.params = {{"threshold", thr},
                  {"use_percentile", params.use_percentile},
                  {"percentile", params.percentile}};
    for (int s = 1; s <= 19; ++s) {
        const double t = 0.05 * s;
        rep.rows.push_back(rates_at(flags_below(t), truth, t));
    }
    rep.flagged = flags_below(thr);

    auto hist20 = [](const std::vector<double>& xs) {
        std::vector<int> h(20, 0);
        for (double x : xs) ++h[std::min(19, std::max(0, static_cast<int>(x * 20.0)))];
        return h;
    };
    std::vector<double> conf_poison, conf_clean_target;
    for (int i = 0; i < train_inputs.size(); ++i) {
        if (truth[i])
            conf_poison.push_back(conf[i]);
        else if (train_inputs.labels[i] == target_class)
            conf_clean_target.push_back(conf[i]);
    }
    rep.aux = {{"hist_poison", hist20(conf_poison)},
               {"hist_clean_target", hist20(conf_clean_target)},
               {"threshold", thr}};
    if (!conf_poison.empty()) {
        rep.aux["var_poison"] = variance(conf_poison);
        rep.aux["mean_poison"] = mean(conf_poison);
    }
    if (!conf_clean_target.empty()) {
        rep.aux["var_clean_target"] = variance(conf_clean_target);
        rep.aux["mean_clean_target"] = mean(conf_clean_target);
    }
    return rep;
}

// ---- density filtering -------------------------------------------------------------------

void ClusteringParams::validate() const {
    check(eps > 0.0, "ClusteringParams: eps must be > 0");
    check(n_min >= 2, "ClusteringParams: n_min must be >= 2");
    check(top_j >= 1, "ClusteringParams: top_j must be >= 1");
}

DbscanResult dbscan(const FeatureBank& bank, double eps, int n_min) {
    bank.validate();
    check(eps > 0.0 && n_min >= 2, "dbscan: invalid parameters");
    const int N = bank.n;

    std::vector<char> core(N, 0);
    for (int i = 0; i < N; ++i) {
        int cnt = 0;
        for (int j = 0; j < N; ++j)
            if (row_distance(bank, i, j) <= eps) ++cnt;  // self included
        core[i] = cnt >= n_min;
    }

    DbscanResult res;
    res.labels.assign(N, -1);
    std::vector<int> stack;
    for (int i = 0; i < N; ++i) {
        if (!core[i] || res.labels[i] != -1) continue;
        const int cid = res.num_clusters++;
        res.labels[i] = cid;
        stack.assign(1, i);
        while (!stack.empty()) {
            const int u = stack.back();
            stack.pop_back();
            for (int v = 0; v < N; ++v)
                if (core[v] && res.labels[v] == -1 && row_distance(bank, u, v) <= eps) {
                    res.labels[v] = cid;
                    stack.push_back(v);
                }
        }
    }
    for (int i = 0; i < N; ++i) {
        if (core[i]) continue;
        int best = -1;
        double bestd = std::numeric_limits<double>::infinity();
        for (int j = 0; j < N; ++j) {
            if (!core[j]) continue;
            const double d = row_distance(bank, i, j);
            if (d <= eps && d < bestd) {
                bestd = d;
                best = j;
            }
        }
        if (best >= 0) res.labels[i] = res.labels[best];
    }
    return res;
}

std::vector<double> mean_k_distances(const FeatureBank& bank, int K) {
    bank.validate();
    check(K >= 1, "mean_k_distances: K must be >= 1");
    check(bank.n > K, "mean_k_distances: need more than K=", K, " rows, got ", bank.n);
    const int N = bank.n;
    std::vector<double> out(N);
    std::vector<double> d(N);
    for (int i = 0; i < N; ++i) {
        for (int j = 0; j < N; ++j) d[j] = row_distance(bank, i, j);
        d[i] = std::numeric_limits<double>::infinity();
        std::nth_element(d.begin(), d.begin() + (K - 1), d.end());
        double s = 0.0;
        for (int t = 0; t < K; ++t) s += d[t];
        out[i] = s / K;
    }
    return out;
}

KneeResult k_distance_knee_curve(const std::vector<double>& sorted_means) {
    const int n = static_cast<int>(sorted_means.size());
    check(n >= 3, "k_distance_knee_curve: need at least 3 points");
    for (int i = 1; i < n; ++i)
        check(sorted_means[i] >= sorted_means[i - 1] - 1e-12,
              "k_distance_knee_curve: curve must be sorted ascending");

    const int window = std::max(5, n / 200);
    const int half = window / 2;
    KneeResult res;
    res.smoothed.resize(n);
    for (int i = 0; i < n; ++i) {
        const int lo = std::max(0, i - half), hi = std::min(n - 1, i + half);
        double s = 0.0;
        for (int j = lo; j <= hi; ++j) s += sorted_means[j];
        res.smoothed[i] = s / (hi - lo + 1);
    }

    // scan only where the smoothing window is full: the clipped windows at the
    // ends fabricate curvature on otherwise straight curves
    int lo_i = half + 1, hi_i = n - 2 - half;
    if (lo_i > hi_i) {
        lo_i = 1;
        hi_i = n - 2;
    }
    double best = -1.0;
    int knee = n / 2;
    for (int i = lo_i; i <= hi_i; ++i) {
        const double d2 =
            std::abs(res.smoothed[i + 1] - 2.0 * res.smoothed[i] + res.smoothed[i - 1]);
        if (d2 > best) {
            best = d2;
            knee = i;
        }
    }
    const double range = res.smoothed.back() - res.smoothed.front();
    if (range <= 1e-12) {
        res.degenerate = true;
        knee = n / 2;
    } else if (best <= 20.0 * range / (static_cast<double>(n) * n)) {
        res.degenerate = true;  // near-uniform curvature: no localized knee
    }
    res.index = knee;
    res.epsilon = res.smoothed[knee];
    return res;
}

KneeResult k_distance_knee(const FeatureBank& bank, int K) {
    std::vector<double> means = mean_k_distances(bank, K);
    std::sort(means.begin(), means.end());
    return k_distance_knee_curve(means);
}

DefenseReport density_filter(const FeatureBank& bank, const std::vector<bool>& truth,
                             const ClusteringParams& params) {
    params.validate();
    check(static_cast<int>(truth.size()) == bank.n, "density_filter: truth size mismatch");

    const DbscanResult db = dbscan(bank, params.eps, params.n_min);
    DefenseReport rep;
    rep.defense = "density_filter";
    rep.params = {{"eps", params.eps}, {"n_min", params.n_min}, {"top_j", params.top_j}};
    int noise = 0;
    for (int l : db.labels) noise += l == -1 ? 1 : 0;

    if (db.num_clusters == 0) {
        rep.rows.push_back(rates_at({}, truth, params.eps));
        rep.aux = {{"warning", "all_noise"}, {"num_clusters", 0}, {"noise", noise}};
        return rep;
    }

    const std::vector<double> kd = mean_k_distances(bank, params.n_min);
    std::vector<double> density(db.num_clusters, 0.0);
    std::vector<int> size(db.num_clusters, 0);
    std::vector<double> kd_sum(db.num_clusters, 0.0);
    for (int i = 0; i < bank.n; ++i) {
        if (db.labels[i] < 0) continue;
        ++size[db.labels[i]];
        kd_sum[db.labels[i]] += kd[i];
    }
    for (int c = 0; c < db.num_clusters; ++c)
        density[c] = size[c] > 0 ? 1.0 / std::max(kd_sum[c] / size[c], 1e-300) : 0.0;

    std::vector<int> order(db.num_clusters);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (density[a] != density[b]) return density[a] > density[b];
        if (size[a] != size[b]) return size[a] > size[b];
        return a < b;
    });
    const int take = std::min(params.top_j, db.num_clusters);
    std::vector<char> selected(db.num_clusters, 0);
    for (int t = 0; t < take; ++t) selected[order[t]] = 1;
    for (int i = 0; i < bank.n; ++i)
        if (db.labels[i] >= 0 && selected[db.labels[i]]) rep.flagged.push_back(i);

    rep.rows.push_back(rates_at(rep.flagged, truth, params.eps));
    json sel = json::array();
    for (int t = 0; t < take; ++t) sel.push_back(order[t]);
    rep.aux = {{"num_clusters", db.num_clusters},
               {"noise", noise},
               {"cluster_sizes", size},
               {"cluster_densities", density},
               {"selected_clusters", sel}};
    return rep;
}

}  // namespace backlab::defense
