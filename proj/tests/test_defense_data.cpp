#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "backlab/defense_data.hpp"
#include "doctest.h"

using namespace backlab;
using analysis::FeatureBank;

namespace {

FeatureBank bank_from_rows(const std::vector<std::vector<double>>& rows, int num_classes,
                           std::vector<int> labels, std::vector<bool> poison = {}) {
    FeatureBank b;
    b.n = static_cast<int>(rows.size());
    b.d = static_cast<int>(rows[0].size());
    b.num_classes = num_classes;
    for (const auto& r : rows)
        for (double v : r) b.feats.push_back(static_cast<float>(v));
    b.labels = std::move(labels);
    b.poison = poison.empty() ? std::vector<bool>(b.n, false) : std::move(poison);
    return b;
}

FeatureBank gaussian_bank(int n, int d, double sigma, std::vector<double> center,
                          std::uint64_t seed) {
    std::vector<std::vector<double>> rows(n, std::vector<double>(d));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, sigma);
    for (auto& r : rows)
        for (int j = 0; j < d; ++j) r[j] = center[j] + g(rng);
    return bank_from_rows(rows, 1, std::vector<int>(n, 0));
}

FeatureBank concat(const FeatureBank& a, const FeatureBank& b) {
    FeatureBank out = a;
    out.n += b.n;
    out.feats.insert(out.feats.end(), b.feats.begin(), b.feats.end());
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    for (bool p : b.poison) out.poison.push_back(p);
    return out;
}

double euclid(const FeatureBank& b, int i, int j) { return analysis::row_distance(b, i, j); }

// brute-force reachability oracle for the deterministic DBSCAN variant
defense::DbscanResult dbscan_oracle(const FeatureBank& bank, double eps, int n_min) {
    const int n = bank.n;
    std::vector<char> core(n, 0);
    for (int i = 0; i < n; ++i) {
        int cnt = 0;
        for (int j = 0; j < n; ++j)
            if (euclid(bank, i, j) <= eps) ++cnt;
        core[i] = cnt >= n_min;
    }
    // union-find over eps-close core pairs
    std::vector<int> parent(n);
    for (int i = 0; i < n; ++i) parent[i] = i;
    std::function<int(int)> find = [&](int x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (core[i] && core[j] && euclid(bank, i, j) <= eps) parent[find(i)] = find(j);

    defense::DbscanResult res;
    res.labels.assign(n, -1);
    std::map<int, int> comp_id;
    for (int i = 0; i < n; ++i)
        if (core[i]) {
            int r = find(i);
            if (!comp_id.count(r)) comp_id[r] = res.num_clusters++;
            res.labels[i] = comp_id[r];
        }
    for (int i = 0; i < n; ++i) {
        if (core[i]) continue;
        int best = -1;
        double bd = 1e300;
        for (int j = 0; j < n; ++j)
            if (core[j]) {
                double d = euclid(bank, i, j);
                if (d <= eps && d < bd) {
                    bd = d;
                    best = j;
                }
            }
        if (best >= 0) res.labels[i] = res.labels[best];
    }
    return res;
}

// renumber cluster ids in order of first appearance so labelings compare
std::vector<int> canonical(const std::vector<int>& labels) {
    std::map<int, int> remap;
    std::vector<int> out(labels.size());
    int next = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) {
            out[i] = -1;
            continue;
        }
        auto it = remap.find(labels[i]);
        if (it == remap.end()) it = remap.emplace(labels[i], next++).first;
        out[i] = it->second;
    }
    return out;
}

// textbook O(N^2) silhouette
double silhouette_oracle(const Eigen::MatrixXd& x, const std::vector<int>& assign) {
    const int n = static_cast<int>(x.rows());
    int k = *std::max_element(assign.begin(), assign.end()) + 1;
    std::vector<int> size(k, 0);
    for (int a : assign) size[a]++;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        if (size[assign[i]] <= 1) continue;  // convention: s = 0 for singletons
        std::vector<double> mean_d(k, 0.0);
        std::vector<int> cnt(k, 0);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            mean_d[assign[j]] += (x.row(i) - x.row(j)).norm();
            cnt[assign[j]]++;
        }
        double a = mean_d[assign[i]] / (size[assign[i]] - 1);
        double b = 1e300;
        for (int c = 0; c < k; ++c)
            if (c != assign[i] && cnt[c] > 0) b = std::min(b, mean_d[c] / cnt[c]);
        total += (b - a) / std::max(a, b);
    }
    return total / n;
}

}  // namespace

TEST_CASE("rates_at computes tpr and fpr") {
    std::vector<bool> truth = {true, false, true, false, false, true};
    auto r = defense::rates_at({0, 1, 2}, truth, 0.25);
    CHECK(r.threshold == 0.25);
    CHECK(r.tpr == doctest::Approx(2.0 / 3.0));
    CHECK(r.fpr == doctest::Approx(1.0 / 3.0));
    auto none = defense::rates_at({}, truth, 0.0);
    CHECK(none.tpr == 0.0);
    CHECK(none.fpr == 0.0);
}

TEST_CASE("abl isolates fast-learned rows by early mean loss") {
    const int N = 100, E = 12;
    train::DynamicsLog log;
    std::vector<bool> truth(N, false);
    for (int i = 0; i < 5; ++i) truth[i * 20] = true;  // rows 0,20,40,60,80
    for (int e = 0; e < E; ++e) {
        log.epoch.push_back(e);
        log.clean_loss.push_back(1.0);
        log.poison_loss.push_back(0.2);
        log.lr.push_back(0.1);
        std::vector<double> row(N);
        for (int i = 0; i < N; ++i)
            row[i] = truth[i] ? 0.05 + 0.001 * i : 0.8 + 0.01 * i + 0.05 * e;
        log.per_sample.push_back(row);
    }
    defense::AblParams params;
    params.isolation_rate = 0.05;
    auto rep = defense::abl_isolate(log, truth, params);
    CHECK(rep.defense == "abl_isolate");
    REQUIRE(rep.flagged.size() == 5);  // ceil(0.05 * 100)
    CHECK(rep.flagged == std::vector<int>{0, 20, 40, 60, 80});

    REQUIRE(rep.rows.size() == params.rate_grid.size());
    for (size_t i = 0; i < rep.rows.size(); ++i)
        CHECK(rep.rows[i].threshold == params.rate_grid[i]);
    // ceil(0.005*100)=1 flagged -> tpr 0.2; 0.05 -> all five
    CHECK(rep.rows[0].tpr == doctest::Approx(0.2));
    CHECK(rep.rows[3].tpr == doctest::Approx(1.0));
    for (size_t i = 1; i < rep.rows.size(); ++i)
        CHECK(rep.rows[i].tpr >= rep.rows[i - 1].tpr);

    train::DynamicsLog empty;
    CHECK_THROWS_AS(defense::abl_isolate(empty, truth, params), backlab::error);
}

TEST_CASE("abl gamma interpolates the loss drop") {
    CHECK(defense::abl_gamma(2.0, 0.5, 0.5) == doctest::Approx(1.25));
    CHECK(defense::abl_gamma(2.0, 0.5, 0.0) == doctest::Approx(2.0));
    CHECK(defense::abl_gamma(2.0, 0.5, 1.0) == doctest::Approx(0.5));
}

TEST_CASE("abl unlearning raises loss on the flagged rows") {
    auto ds = data::make_synthetic("abl", "train", 40, 4, 16, 3);
    nn::EncoderConfig ec;
    ec.backbone.width_mult = 0.125;
    nn::Classifier clf(nn::build_encoder(ec), 4, 1);

    std::vector<int> flagged = {0, 1, 2, 3, 4, 5, 6, 7};
    std::vector<const Image*> ptrs;
    for (int i : flagged) ptrs.push_back(&ds.images[i]);
    std::vector<int> lbl;
    for (int i : flagged) lbl.push_back(ds.labels[i]);
    auto loss_on_flagged = [&] {
        nn::Tensor x = nn::images_to_tensor(ptrs);
        auto r = nn::cross_entropy(clf.logits(x, false), lbl, false);
        return r.loss;
    };
    double before = loss_on_flagged();
    defense::abl_unlearn(clf, ds, flagged, /*gamma=*/100.0, /*epochs=*/3, /*lr=*/0.05, 5);
    CHECK(loss_on_flagged() > before);
}

TEST_CASE("pca projection preserves planar geometry") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> g(0.0, 1.0);
    Eigen::MatrixXd x(60, 5);
    for (int i = 0; i < 60; ++i) {
        double a = g(rng), b = g(rng);  // rank-2 signal embedded in 5-D
        for (int j = 0; j < 5; ++j) x(i, j) = a * (j + 1) + b * std::cos(j * 1.7);
    }
    Eigen::MatrixXd p = defense::pca_project(x, 2);
    REQUIRE(p.rows() == 60);
    REQUIRE(p.cols() == 2);
    for (int i = 1; i < 10; ++i)
        CHECK((p.row(i) - p.row(0)).norm() ==
              doctest::Approx((x.row(i) - x.row(0)).norm()).epsilon(1e-6));

    // requesting every direction keeps all variance
    Eigen::MatrixXd full = defense::pca_project(x, 5);
    Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
    CHECK(full.squaredNorm() == doctest::Approx(centered.squaredNorm()).epsilon(1e-9));
}

TEST_CASE("kmeans2 separates well separated blobs deterministically") {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g(0.0, 0.2);
    Eigen::MatrixXd x(40, 2);
    for (int i = 0; i < 40; ++i) {
        double cx = i < 25 ? 0.0 : 8.0;
        x(i, 0) = cx + g(rng);
        x(i, 1) = g(rng);
    }
    Rng r1(3);
    auto a1 = defense::kmeans2(x, 50, r1);
    Rng r2(3);
    auto a2 = defense::kmeans2(x, 50, r2);
    CHECK(a1 == a2);
    for (int v : a1) CHECK((v == 0 || v == 1));
    for (int i = 1; i < 25; ++i) CHECK(a1[i] == a1[0]);
    for (int i = 26; i < 40; ++i) CHECK(a1[i] == a1[25]);
    CHECK(a1[0] != a1[25]);
}

TEST_CASE("silhouette matches the textbook oracle") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_int_distribution<int> coin(0, 1);
    for (int trial = 0; trial < 4; ++trial) {
        Eigen::MatrixXd x(100, 3);
        for (int i = 0; i < 100; ++i)
            for (int j = 0; j < 3; ++j) x(i, j) = g(rng);
        std::vector<int> assign(100);
        for (auto& a : assign) a = coin(rng);
        assign[0] = 0;
        assign[1] = 1;  // both clusters inhabited
        CHECK(defense::silhouette_score(x, assign) ==
              doctest::Approx(silhouette_oracle(x, assign)).epsilon(1e-9));
    }
    // separated blobs score close to 1
    Eigen::MatrixXd blobs(20, 1);
    std::vector<int> assign(20);
    for (int i = 0; i < 20; ++i) {
        blobs(i, 0) = (i < 10 ? 0.0 : 100.0) + 0.01 * i;
        assign[i] = i < 10 ? 0 : 1;
    }
    CHECK(defense::silhouette_score(blobs, assign) > 0.95);
}

TEST_CASE("activation clustering flags the planted minority cluster") {
    // class 0 is clean unimodal; class 1 carries a shifted poison clump
    std::mt19937_64 rng(13);
    std::normal_distribution<double> g(0.0, 0.5);
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    std::vector<bool> truth;
    for (int i = 0; i < 60; ++i) {
        rows.push_back({g(rng), g(rng), g(rng), g(rng)});
        labels.push_back(0);
        truth.push_back(false);
    }
    for (int i = 0; i < 50; ++i) {
        rows.push_back({5.0 + g(rng), g(rng), g(rng), g(rng)});
        labels.push_back(1);
        truth.push_back(false);
    }
    for (int i = 0; i < 12; ++i) {  // minority mode inside class 1
        rows.push_back({5.0 + g(rng), 9.0 + g(rng), g(rng), g(rng)});
        labels.push_back(1);
        truth.push_back(true);
    }
    FeatureBank bank = bank_from_rows(rows, 2, labels);
    defense::ACParams params;
    params.pca_dim = 3;
    auto rep = defense::activation_clustering(bank, truth, params);
    CHECK(rep.defense == "activation_clustering");
    CHECK(rep.aux.at("suspected_class").get<int>() == 1);
    REQUIRE(!rep.flagged.empty());
    int tp = 0;
    for (int i : rep.flagged) tp += truth[i] ? 1 : 0;
    CHECK(static_cast<double>(tp) / 12.0 >= 0.9);
    CHECK(static_cast<double>(rep.flagged.size() - tp) <= 2);
    CHECK(std::is_sorted(rep.flagged.begin(), rep.flagged.end()));

    // determinism
    auto rep2 = defense::activation_clustering(bank, truth, params);
    CHECK(rep2.flagged == rep.flagged);
}

TEST_CASE("scan-lite flags the mixture class and spares unimodal ones") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> g(0.0, 0.6);
    auto fill = [&](int n, std::vector<double> c, int label, bool is_poison,
                    std::vector<std::vector<double>>& rows, std::vector<int>& labels,
                    std::vector<bool>& truth) {
        for (int i = 0; i < n; ++i) {
            rows.push_back({c[0] + g(rng), c[1] + g(rng), c[2] + g(rng)});
            labels.push_back(label);
            truth.push_back(is_poison);
        }
    };
    std::vector<std::vector<double>> rows, ref_rows;
    std::vector<int> labels, ref_labels;
    std::vector<bool> truth, ref_truth;
    // four clean classes at distinct centers
    fill(50, {0, 0, 0}, 0, false, rows, labels, truth);
    fill(50, {6, 0, 0}, 1, false, rows, labels, truth);
    fill(50, {0, 6, 0}, 2, false, rows, labels, truth);
    fill(50, {0, 0, 6}, 3, false, rows, labels, truth);
    // poisoned rows mislabeled into class 1, sitting at class 0's center
    fill(15, {0, 0, 0}, 1, true, rows, labels, truth);
    FeatureBank bank = bank_from_rows(rows, 4, labels, truth);
    bank.poison.assign(bank.n, false);  // defense must not peek at flags

    fill(40, {0, 0, 0}, 0, false, ref_rows, ref_labels, ref_truth);
    fill(40, {6, 0, 0}, 1, false, ref_rows, ref_labels, ref_truth);
    fill(40, {0, 6, 0}, 2, false, ref_rows, ref_labels, ref_truth);
    fill(40, {0, 0, 6}, 3, false, ref_rows, ref_labels, ref_truth);
    FeatureBank ref = bank_from_rows(ref_rows, 4, ref_labels);

    auto rep = defense::scan_lite(bank, ref, truth);
    CHECK(rep.defense == "scan_lite");
    REQUIRE(!rep.flagged.empty());
    int tp = 0;
    for (int i : rep.flagged) tp += truth[i] ? 1 : 0;
    CHECK(static_cast<double>(tp) / 15.0 >= 0.8);
    CHECK(rep.flagged.size() - tp <= 10);
    CHECK(rep.rows.size() == defense::ScanParams{}.fpr_grid.size());

    // clean bank: no class should clear the robust-index bar
    FeatureBank clean = bank_from_rows(ref_rows, 4, ref_labels);
    auto rep2 = defense::scan_lite(clean, ref, std::vector<bool>(clean.n, false));
    CHECK(rep2.flagged.empty());
}

TEST_CASE("shannon entropy in bits") {
    CHECK(defense::shannon_entropy_bits({1.0, 0.0, 0.0}) == doctest::Approx(0.0));
    std::vector<double> uniform10(10, 0.1);
    CHECK(defense::shannon_entropy_bits(uniform10) ==
          doctest::Approx(3.321928094887362).epsilon(1e-9));
    std::vector<double> uniform4(4, 0.25);
    CHECK(defense::shannon_entropy_bits(uniform4) == doctest::Approx(2.0));
    CHECK(defense::shannon_entropy_bits({0.5, 0.5, 0.0}) == doctest::Approx(1.0));
}

TEST_CASE("strip calibrates thresholds on clean validation entropy") {
    auto train_ds = data::make_synthetic("strip", "train", 40, 4, 16, 19);
    auto val_ds = data::make_synthetic("strip", "val", 60, 4, 16, 20);
    auto overlay_ds = data::make_synthetic("strip", "ovl", 30, 4, 16, 21);
    nn::EncoderConfig ec;
    ec.backbone.width_mult = 0.125;
    nn::Classifier clf(nn::build_encoder(ec), 4, 3);

    defense::StripParams params;
    params.n_overlays = 8;
    params.seed = 5;
    std::vector<bool> truth(train_ds.size(), false);
    auto rep = defense::strip_detect(clf, train_ds, truth, overlay_ds, val_ds, params);
    CHECK(rep.defense == "strip");
    REQUIRE(rep.rows.size() == params.fpr_grid.size());
    for (size_t i = 1; i < rep.rows.size(); ++i)
        CHECK(rep.rows[i].threshold >= rep.rows[i - 1].threshold);
    CHECK(std::is_sorted(rep.flagged.begin(), rep.flagged.end()));

    auto rep2 = defense::strip_detect(clf, train_ds, truth, overlay_ds, val_ds, params);
    CHECK(rep2.flagged == rep.flagged);

    // entropies: one per input, all finite and within [0, log2 C]
    auto ent = defense::strip_entropies(clf, train_ds.images, overlay_ds.images, params);
    REQUIRE(ent.size() == static_cast<size_t>(train_ds.size()));
    for (double e : ent) {
        CHECK(e >= 0.0);
        CHECK(e <= std::log2(4.0) + 1e-9);
    }
}

TEST_CASE("bdd flags low-confidence rows against a manual recount") {
    auto ds = data::make_synthetic("bdd", "train", 50, 4, 16, 23);
    nn::EncoderConfig ec;
    ec.backbone.width_mult = 0.125;
    nn::Classifier clf(nn::build_encoder(ec), 4, 7);
    std::vector<bool> truth(ds.size(), false);
    truth[4] = truth[9] = true;

    auto conf = defense::confidence_scores(clf, ds, 16);
    REQUIRE(conf.size() == static_cast<size_t>(ds.size()));
    // oracle: max softmax of the logits
    nn::Tensor x = nn::images_to_tensor(std::vector<const Image*>{&ds.images[0]});
    auto ce = nn::cross_entropy(clf.logits(x, false), {0}, false);
    CHECK(conf[0] == doctest::Approx(ce.max_prob[0]).epsilon(1e-6));

    double thr = conf[conf.size() / 2];  // split the batch at a real value
    defense::BddParams params;
    params.threshold = thr;
    auto rep = defense::bdd_confidence_filter(clf, ds, truth, 1, params);
    std::vector<int> want;
    for (int i = 0; i < ds.size(); ++i)
        if (conf[i] < thr) want.push_back(i);
    CHECK(rep.flagged == want);
    CHECK(rep.aux.contains("hist_poison"));
    CHECK(rep.aux.at("hist_poison").size() == 20);
    CHECK(rep.aux.contains("hist_clean_target"));

    defense::BddParams pct;
    pct.use_percentile = true;
    pct.percentile = 0.1;
    auto rep2 = defense::bdd_confidence_filter(clf, ds, truth, 1, pct);
    CHECK(rep2.flagged.size() == 5);  // lowest 10% of 50
    std::vector<int> order(ds.size());
    for (int i = 0; i < ds.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return conf[a] < conf[b]; });
    for (int i : rep2.flagged)
        CHECK(std::find(order.begin(), order.begin() + 5, i) != order.begin() + 5);
}

TEST_CASE("dbscan equals the brute-force reachability oracle") {
    std::mt19937_64 rng(29);
    std::normal_distribution<double> g(0.0, 1.0);
    struct Setting {
        double eps;
        int n_min;
    };
    std::vector<Setting> settings = {{0.4, 4}, {0.8, 8}, {1.2, 15}};
    for (int trial = 0; trial < 6; ++trial) {
        const int n = 220;
        std::vector<std::vector<double>> rows(n, std::vector<double>(3));
        for (auto& r : rows) {
            double cx = (rng() % 3) * 2.5;  // loose clumps plus spread
            r[0] = cx + g(rng);
            r[1] = g(rng);
            r[2] = 0.5 * g(rng);
        }
        FeatureBank bank = bank_from_rows(rows, 1, std::vector<int>(n, 0));
        for (auto [eps, n_min] : settings) {
            auto got = defense::dbscan(bank, eps, n_min);
            auto want = dbscan_oracle(bank, eps, n_min);
            CHECK(got.num_clusters == want.num_clusters);
            CHECK(canonical(got.labels) == canonical(want.labels));
        }
    }
    FeatureBank small = gaussian_bank(10, 2, 1.0, {0, 0}, 31);
    CHECK_THROWS_AS(defense::dbscan(small, -1.0, 4), backlab::error);
    CHECK_THROWS_AS(defense::dbscan(small, 0.5, 1), backlab::error);
}

TEST_CASE("dbscan is row-order independent up to renumbering") {
    FeatureBank bank = concat(gaussian_bank(40, 2, 0.2, {0, 0}, 33),
                              gaussian_bank(40, 2, 0.2, {5, 5}, 34));
    auto base = defense::dbscan(bank, 0.6, 5);

    // reverse row order
    FeatureBank rev = bank;
    for (int i = 0; i < bank.n; ++i)
        for (int d = 0; d < bank.d; ++d)
            rev.feats[static_cast<size_t>(i) * bank.d + d] =
                bank.feats[static_cast<size_t>(bank.n - 1 - i) * bank.d + d];
    auto rres = defense::dbscan(rev, 0.6, 5);
    std::vector<int> unrev(bank.n);
    for (int i = 0; i < bank.n; ++i) unrev[i] = rres.labels[bank.n - 1 - i];
    CHECK(canonical(unrev) == canonical(base.labels));
    CHECK(rres.num_clusters == base.num_clusters);
}

TEST_CASE("mean k-distances match a brute-force recount") {
    FeatureBank bank = gaussian_bank(30, 3, 1.0, {0, 0, 0}, 35);
    auto got = defense::mean_k_distances(bank, 4);
    REQUIRE(got.size() == 30);
    for (int i = 0; i < 30; ++i) {
        std::vector<double> d;
        for (int j = 0; j < 30; ++j)
            if (j != i) d.push_back(euclid(bank, i, j));
        std::sort(d.begin(), d.end());
        double want = (d[0] + d[1] + d[2] + d[3]) / 4.0;
        CHECK(got[i] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("k-distance knee finds the jump in a two-scale curve") {
    std::vector<double> curve;
    for (int i = 0; i < 120; ++i) curve.push_back(0.1 + 0.0005 * i);
    for (int i = 0; i < 40; ++i) curve.push_back(0.5 + 0.05 * i);
    auto knee = defense::k_distance_knee_curve(curve);
    CHECK(!knee.degenerate);
    CHECK(knee.index > 110);
    CHECK(knee.index < 130);
    CHECK(knee.epsilon >= 0.1);
    CHECK(knee.epsilon <= 1.0);

    std::vector<double> flat(50, 0.3);
    auto fk = defense::k_distance_knee_curve(flat);
    CHECK(fk.degenerate);

    std::vector<double> linear;
    for (int i = 0; i < 300; ++i) linear.push_back(0.01 * i);
    CHECK(defense::k_distance_knee_curve(linear).degenerate);

    CHECK_THROWS_AS(defense::k_distance_knee_curve({1.0, 2.0}), backlab::error);
    CHECK_THROWS_AS(defense::k_distance_knee_curve({3.0, 2.0, 1.0, 0.5}), backlab::error);

    // end-to-end helper agrees with the curve form
    FeatureBank two_scale = concat(gaussian_bank(150, 2, 0.05, {0, 0}, 37),
                                   gaussian_bank(60, 2, 2.5, {0, 0}, 38));
    auto k1 = defense::k_distance_knee(two_scale, 5);
    auto means = defense::mean_k_distances(two_scale, 5);
    std::sort(means.begin(), means.end());
    auto k2 = defense::k_distance_knee_curve(means);
    CHECK(k1.epsilon == doctest::Approx(k2.epsilon).epsilon(1e-12));
    CHECK(k1.index == k2.index);
}

TEST_CASE("density filter flags the planted dense cluster") {
    FeatureBank poison = gaussian_bank(60, 3, 0.05, {2, 2, 2}, 39);
    FeatureBank clean = gaussian_bank(240, 3, 1.2, {0, 0, 0}, 40);
    FeatureBank bank = concat(poison, clean);
    std::vector<bool> truth(bank.n, false);
    for (int i = 0; i < 60; ++i) truth[i] = true;

    defense::ClusteringParams params;
    params.eps = 0.25;
    params.n_min = 20;
    params.top_j = 1;
    auto rep = defense::density_filter(bank, truth, params);
    CHECK(rep.defense == "density_filter");
    REQUIRE(!rep.flagged.empty());
    int tp = 0;
    for (int i : rep.flagged) tp += truth[i] ? 1 : 0;
    CHECK(static_cast<double>(tp) / 60.0 >= 0.8);
    CHECK(rep.aux.at("num_clusters").get<int>() >= 1);

    // absurd n_min: everything is noise, reported as a warning
    defense::ClusteringParams noisy = params;
    noisy.n_min = 500;
    auto rep2 = defense::density_filter(bank, truth, noisy);
    CHECK(rep2.flagged.empty());
    CHECK(rep2.aux.at("warning").get<std::string>() == "all_noise");

    defense::ClusteringParams bad;
    bad.eps = -1.0;
    CHECK_THROWS_AS(bad.validate(), backlab::error);
}

TEST_CASE("defense reports round-trip through json") {
    namespace fs = std::filesystem;
    defense::DefenseReport rep;
    rep.defense = "demo";
    rep.params = {{"alpha", 0.5}};
    rep.rows = {{0.01, 0.8, 0.01}, {0.02, 0.9, 0.02}};
    rep.flagged = {3, 5, 8};
    rep.aux = {{"note", "x"}};
    auto path = (fs::temp_directory_path() / "backlab_defrep.json").string();
    rep.save_json(path);
    auto back = defense::DefenseReport::load_json(path);
    CHECK(back.defense == "demo");
    CHECK(back.params.at("alpha").get<double>() == 0.5);
    REQUIRE(back.rows.size() == 2);
    CHECK(back.rows[1].tpr == doctest::Approx(0.9));
    CHECK(back.flagged == rep.flagged);
    CHECK(back.aux.at("note") == "x");
    fs::remove(path);
}
