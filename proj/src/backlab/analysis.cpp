#include "backlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

using nlohmann::json;

namespace backlab::analysis {

FeatureBank bank_from_dataset(nn::EncoderModel& enc, const data::ImageDataset& ds,
                              const std::vector<bool>& poison_flags, int batch_size) {
    ds.validate();
    std::vector<bool> flags = poison_flags;
    if (flags.empty()) flags.assign(ds.size(), false);
    check(static_cast<int>(flags.size()) == ds.size(), "bank_from_dataset: flag count ",
          flags.size(), " != dataset size ", ds.size());
    nn::Tensor f = train::encode_dataset(enc, ds, batch_size);
    FeatureBank b;
    b.n = ds.size();
    b.d = f.dim(1);
    b.num_classes = ds.num_classes;
    b.feats = std::move(f.data);
    b.labels = ds.labels;
    b.poison = flags;
    b.validate();
    return b;
}

std::vector<int> predict(nn::Classifier& clf, const data::ImageDataset& ds, int batch_size) {
    std::vector<int> preds(ds.size());
    for (int b0 = 0; b0 < ds.size(); b0 += batch_size) {
        const int bsz = std::min(batch_size, ds.size() - b0);
        std::vector<const Image*> imgs(bsz);
        for (int i = 0; i < bsz; ++i) imgs[i] = &ds.images[b0 + i];
        nn::Tensor logits = clf.logits(nn::images_to_tensor(imgs), false);
        const int K = logits.dim(1);
        for (int i = 0; i < bsz; ++i) {
            const float* row = logits.data.data() + static_cast<std::size_t>(i) * K;
            preds[b0 + i] = static_cast<int>(std::max_element(row, row + K) - row);
        }
    }
    return preds;
}

EvalResult evaluate_acc_asr(nn::Classifier& clf, const data::ImageDataset& clean_test,
                            const data::ImageDataset& trigger_test, int target_class,
                            int batch_size) {
    EvalResult r;
    const std::vector<int> cp = predict(clf, clean_test, batch_size);
    int correct = 0;
    for (int i = 0; i < clean_test.size(); ++i)
        if (cp[i] == clean_test.labels[i]) ++correct;
    r.n_clean = clean_test.size();
    r.acc = static_cast<double>(correct) / std::max(1, r.n_clean);

    const std::vector<int> tp = predict(clf, trigger_test, batch_size);
    int hits = 0, counted = 0;
    for (int i = 0; i < trigger_test.size(); ++i) {
        if (trigger_test.labels[i] == target_class) continue;  // defensive; usually pre-filtered
        ++counted;
        if (tp[i] == target_class) ++hits;
    }
    check(counted > 0, "evaluate_acc_asr: trigger set has no off-target rows");
    r.n_trigger = counted;
    r.asr = static_cast<double>(hits) / counted;
    return r;
}

// ---- entanglement ratio -----------------------------------------------------------

void ERReport::save_json(const std::string& path) const {
    json j;
    j["k"] = params.k;
    j["per_class"] = params.per_class;
    j["m_test"] = params.m_test;
    j["seed"] = params.seed;
    j["target_class"] = target_class;
    j["num_classes"] = num_classes;
    j["er"] = per_class;
    j["bank_counts"] = bank_counts;
    j["probes_used"] = probes_used;
    j["er_pseudo"] = per_class.empty() ? 0.0 : per_class.back();
    std::ofstream out(path);
    check(out.good(), "ERReport::save_json: cannot write ", path);
    out << j.dump(2) << "\n";
}

ERReport entanglement_ratio(const FeatureBank& train_bank, const FeatureBank& test_bank,
                            int target_class, const ERParams& params) {
    train_bank.validate();
    test_bank.validate();
    check(train_bank.d == test_bank.d, "entanglement_ratio: feature dims differ (",
          train_bank.d, " vs ", test_bank.d, ")");
    check(params.k >= 1, "entanglement_ratio: k must be >= 1");
    check(params.per_class >= 1 && params.m_test >= 1,
          "entanglement_ratio: per_class and m_test must be >= 1");
    const int C = train_bank.num_classes;
    check(target_class >= 0 && target_class < C, "entanglement_ratio: target class ",
          target_class, " outside [0,", C, ")");

    Rng rng(params.seed);

    // group bank rows: clean rows by label, poisoned rows into pseudo-class C
    std::vector<std::vector<int>> groups(C + 1);
    for (int i = 0; i < train_bank.n; ++i) groups[train_bank.pseudo_label(i)].push_back(i);

    ERReport rep;
    rep.params = params;
    rep.target_class = target_class;
    rep.num_classes = C;
    rep.bank_counts.assign(C + 1, 0);

    std::vector<int> bank_rows;        // sampled bank
    std::vector<int> bank_row_class;   // pseudo-class per sampled row
    for (int c = 0; c <= C; ++c) {
        auto& g = groups[c];
        const int take = std::min<int>(params.per_class, static_cast<int>(g.size()));
        std::shuffle(g.begin(), g.end(), rng);
        std::sort(g.begin(), g.begin() + take);  // deterministic tie-breaking by bank order
        for (int t = 0; t < take; ++t) {
            bank_rows.push_back(g[t]);
            bank_row_class.push_back(c);
        }
        rep.bank_counts[c] = take;
    }
    const int B = static_cast<int>(bank_rows.size());
    check(B >= params.k, "entanglement_ratio: sampled bank has ", B, " rows but k is ",
          params.k);

    // clean target-class probes
    std::vector<int> probes;
    for (int i = 0; i < test_bank.n; ++i)
        if (!test_bank.poison[i] && test_bank.labels[i] == target_class) probes.push_back(i);
    check(!probes.empty(), "entanglement_ratio: test bank has no clean rows of class ",
          target_class);
    std::shuffle(probes.begin(), probes.end(), rng);
    if (static_cast<int>(probes.size()) > params.m_test) probes.resize(params.m_test);
    rep.probes_used = static_cast<int>(probes.size());

    rep.per_class.assign(C + 1, 0.0);
    std::vector<std::pair<double, int>> dist(B);  // (distance, bank position)
    for (int p : probes) {
        const float* q = test_bank.row(p);
        for (int bpos = 0; bpos < B; ++bpos) {
            const float* r = train_bank.row(bank_rows[bpos]);
            double s = 0.0;
            for (int dd = 0; dd < train_bank.d; ++dd) {
                const double diff = static_cast<double>(q[dd]) - r[dd];
                s += diff * diff;
            }
            dist[bpos] = {s, bpos};
        }
        std::partial_sort(dist.begin(), dist.begin() + params.k, dist.end());
        for (int t = 0; t < params.k; ++t)
            rep.per_class[bank_row_class[dist[t].second]] += 1.0;
    }
    const double denom = static_cast<double>(rep.probes_used) * params.k;
    for (double& v : rep.per_class) v /= denom;
    return rep;
}

// ---- KSG mutual information ---------------------------------------------------------

void MIEstimate::save_json(const std::string& path) const {
    json j;
    j["mi_nats"] = mi_nats;
    j["n"] = n;
    j["k"] = k;
    j["degenerate"] = degenerate;
    std::ofstream out(path);
    check(out.good(), "MIEstimate::save_json: cannot write ", path);
    out << j.dump(2) << "\n";
}

MIEstimate ksg_mutual_information(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int k,
                                  std::uint64_t jitter_seed, double jitter) {
    const int N = static_cast<int>(x.rows());
    check(y.rows() == N, "ksg_mutual_information: row count mismatch (", x.rows(), " vs ",
          y.rows(), ")");
    check(N >= k + 1, "ksg_mutual_information: need at least k+1 = ", k + 1, " rows, got ", N);
    check(k >= 1, "ksg_mutual_information: k must be >= 1");

    Eigen::MatrixXd xj = x, yj = y;
    Rng rng(jitter_seed);
    std::uniform_real_distribution<double> u(0.0, jitter);
    for (int i = 0; i < N; ++i) {
        for (int d = 0; d < xj.cols(); ++d) xj(i, d) += u(rng);
        for (int d = 0; d < yj.cols(); ++d) yj(i, d) += u(rng);
    }

    // pairwise distances per subspace
    Eigen::MatrixXd dx(N, N), dy(N, N);
    double diff_acc = 0.0;
    for (int i = 0; i < N; ++i) {
        dx(i, i) = 0.0;
        dy(i, i) = 0.0;
        for (int j = i + 1; j < N; ++j) {
            const double ddx = (xj.row(i) - xj.row(j)).norm();
            const double ddy = (yj.row(i) - yj.row(j)).norm();
            dx(i, j) = dx(j, i) = ddx;
            dy(i, j) = dy(j, i) = ddy;
            diff_acc += std::abs(ddx - ddy);
        }
    }

    double psi_sum = 0.0;
    std::vector<std::pair<double, int>> joint(N - 1);
    for (int i = 0; i < N; ++i) {
        int m = 0;
        for (int j = 0; j < N; ++j) {
            if (j == i) continue;
            joint[m++] = {std::max(dx(i, j), dy(i, j)), j};
        }
        std::nth_element(joint.begin(), joint.begin() + (k - 1), joint.end());
        double ex = 0.0, ey = 0.0;
        for (int t = 0; t < k; ++t) {
            ex = std::max(ex, dx(i, joint[t].second));
            ey = std::max(ey, dy(i, joint[t].second));
        }
        int nx = 0, ny = 0;
        for (int j = 0; j < N; ++j) {
            if (j == i) continue;
            if (dx(i, j) < ex) ++nx;
            if (dy(i, j) < ey) ++ny;
        }
        // the boundary neighbor itself is excluded by the strict inequality; at k=1 the
        // count can reach zero, so clamp to keep the digamma finite
        psi_sum += digamma(std::max(1, nx)) + digamma(std::max(1, ny));
    }

    MIEstimate est;
    est.n = N;
    est.k = k;
    const double npairs = 0.5 * N * (N - 1.0);
    est.degenerate = diff_acc / npairs <= 100.0 * jitter;
    est.mi_nats = digamma(k) - 1.0 / k - psi_sum / N + digamma(N);
    return est;
}

MIEstimate representation_mi(const FeatureBank& clean, const FeatureBank& triggered, int k,
                             int max_n, std::uint64_t seed) {
    clean.validate();
    triggered.validate();
    check(clean.n == triggered.n && clean.d == triggered.d,
          "representation_mi: banks must align row-for-row");
    std::vector<int> rows(clean.n);
    std::iota(rows.begin(), rows.end(), 0);
    if (clean.n > max_n) {
        Rng rng(seed);
        std::shuffle(rows.begin(), rows.end(), rng);
        rows.resize(max_n);
        std::sort(rows.begin(), rows.end());
    }
    const int N = static_cast<int>(rows.size());
    Eigen::MatrixXd x(N, clean.d), y(N, clean.d);
    for (int i = 0; i < N; ++i)
        for (int d = 0; d < clean.d; ++d) {
            x(i, d) = clean.row(rows[i])[d];
            y(i, d) = triggered.row(rows[i])[d];
        }
    return ksg_mutual_information(x, y, k, derive_seed(seed, "ksg.jitter"));
}

// ---- distance matrix -----------------------------------------------------------------

Eigen::MatrixXd pairwise_distance_matrix(const FeatureBank& bank, bool normalize) {
    bank.validate();
    const int C = bank.num_classes;
    std::vector<std::vector<int>> groups(C + 1);
    for (int i = 0; i < bank.n; ++i) groups[bank.pseudo_label(i)].push_back(i);
    for (int c = 0; c <= C; ++c)
        check(groups[c].size() >= 2, "pairwise_distance_matrix: group ",
              (c == C ? std::string("poisoned") : std::to_string(c)), " has ",
              groups[c].size(), " rows; need at least 2");

    Eigen::MatrixXd m(C + 1, C + 1);
    for (int a = 0; a <= C; ++a)
        for (int b = a; b <= C; ++b) {
            double sum = 0.0;
            std::size_t cnt = 0;
            if (a == b) {
                const auto& g = groups[a];
                for (std::size_t i = 0; i < g.size(); ++i)
                    for (std::size_t j = i + 1; j < g.size(); ++j) {
                        sum += row_distance(bank, g[i], g[j]);
                        ++cnt;
                    }
            } else {
                for (int i : groups[a])
                    for (int j : groups[b]) {
                        sum += row_distance(bank, i, j);
                        ++cnt;
                    }
            }
            m(a, b) = m(b, a) = sum / static_cast<double>(cnt);
        }
    if (normalize) {
        const double lo = m.minCoeff(), hi = m.maxCoeff();
        check(hi > lo, "pairwise_distance_matrix: degenerate matrix (all distances equal)");
        m = (m.array() - lo) / (hi - lo);
    }
    return m;
}

// ---- dynamics --------------------------------------------------------------------------

DynamicsComparison compare_dynamics(const train::DynamicsLog& log) {
    const int E = log.epochs();
    check(E >= 3, "compare_dynamics: need at least 3 epochs, got ", E);
    for (int e = 0; e < E; ++e)
        check(std::isfinite(log.clean_loss[e]) && std::isfinite(log.poison_loss[e]),
              "compare_dynamics: non-finite loss at epoch ", e);

    auto half_life = [&](const std::vector<double>& s) {
        const double mid = 0.5 * (s.front() + s.back());
        for (int e = 0; e < E; ++e)
            if (s[e] <= mid) return e;
        return E - 1;
    };
    DynamicsComparison r;
    r.half_life_clean = half_life(log.clean_loss);
    r.half_life_poison = half_life(log.poison_loss);
    double acc = 0.0;
    for (int e = 0; e < E; ++e) {
        const double c = log.clean_loss[e];
        acc += (c > 1e-12) ? (c - log.poison_loss[e]) / c : 0.0;
    }
    r.separation_score = acc / E;
    return r;
}

// ---- sweep ------------------------------------------------------------------------------

std::vector<SweepPoint> trigger_strength_sweep(
    const std::vector<double>& grid, const std::function<SweepPoint(double)>& run_point) {
    check(!grid.empty(), "trigger_strength_sweep: empty grid");
    std::vector<SweepPoint> rows;
    rows.reserve(grid.size());
    for (double s : grid) {
        try {
            SweepPoint p = run_point(s);
            p.strength = s;
            p.ok = true;
            rows.push_back(std::move(p));
        } catch (const std::exception& e) {
            SweepPoint p;
            p.strength = s;
            p.ok = false;
            p.error = e.what();
            rows.push_back(std::move(p));
        }
    }
    return rows;
}

void save_sweep_csv(const std::vector<SweepPoint>& rows, const std::string& path) {
    std::ofstream out(path);
    check(out.good(), "save_sweep_csv: cannot write ", path);
    out.precision(10);
    out << "strength,acc,asr,mi_nats,er_pseudo,ok,error\n";
    for (const auto& r : rows)
        out << r.strength << "," << r.acc << "," << r.asr << "," << r.mi_nats << ","
            << r.er_pseudo << "," << (r.ok ? 1 : 0) << ",\"" << r.error << "\"\n";
}

}  // namespace backlab::analysis
