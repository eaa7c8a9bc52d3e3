#include "backlab/losses.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace backlab::nn {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd to_double(const Tensor& t) {
    check(t.rank() == 2, "loss: expected 2-D embeddings, got ", t.shape_str());
    MatrixXd m(t.dim(0), t.dim(1));
    for (int i = 0; i < t.dim(0); ++i)
        for (int j = 0; j < t.dim(1); ++j)
            m(i, j) = t.data[static_cast<std::size_t>(i) * t.dim(1) + j];
    return m;
}

Tensor to_tensor(const MatrixXd& m) {
    Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j)
            t.data[static_cast<std::size_t>(i) * m.cols() + j] = static_cast<float>(m(i, j));
    return t;
}

// rows normalized to unit length; returns norms for the backward pass
MatrixXd normalize_rows(const MatrixXd& m, VectorXd& norms) {
    norms = m.rowwise().norm();
    MatrixXd out = m;
    for (int i = 0; i < m.rows(); ++i) {
        check(norms[i] > 1e-12, "loss: zero-norm embedding at row ", i);
        out.row(i) /= norms[i];
    }
    return out;
}

// grad through row normalization: given dL/d(hat x), produce dL/dx
MatrixXd denormalize_grad(const MatrixXd& ghat, const MatrixXd& hat, const VectorXd& norms) {
    MatrixXd g(ghat.rows(), ghat.cols());
    for (int i = 0; i < ghat.rows(); ++i) {
        const double dot = ghat.row(i).dot(hat.row(i));
        g.row(i) = (ghat.row(i) - dot * hat.row(i)) / norms[i];
    }
    return g;
}

}  // namespace

CEResult cross_entropy(const Tensor& logits, const std::vector<int>& labels, bool need_grad) {
    check(logits.rank() == 2, "cross_entropy: expected [N,K] logits");
    const int N = logits.dim(0), K = logits.dim(1);
    check(static_cast<int>(labels.size()) == N, "cross_entropy: ", labels.size(), " labels for ",
          N, " rows");
    CEResult r;
    r.per_sample.resize(N);
    r.predictions.resize(N);
    r.max_prob.resize(N);
    if (need_grad) r.glogits = Tensor({N, K});
    double total = 0.0;
    for (int i = 0; i < N; ++i) {
        const float* row = logits.data.data() + static_cast<std::size_t>(i) * K;
        check(labels[i] >= 0 && labels[i] < K, "cross_entropy: label ", labels[i],
              " outside [0,", K, ")");
        double mx = row[0];
        int arg = 0;
        for (int k = 1; k < K; ++k)
            if (row[k] > mx) {
                mx = row[k];
                arg = k;
            }
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k]) - mx);
        const double logz = std::log(z) + mx;
        r.per_sample[i] = logz - row[labels[i]];
        r.predictions[i] = arg;
        r.max_prob[i] = std::exp(static_cast<double>(row[arg]) - logz);
        total += r.per_sample[i];
        if (need_grad) {
            float* g = r.glogits.data.data() + static_cast<std::size_t>(i) * K;
            for (int k = 0; k < K; ++k) {
                const double p = std::exp(static_cast<double>(row[k]) - logz);
                g[k] = static_cast<float>((p - (k == labels[i] ? 1.0 : 0.0)) / N);
            }
        }
    }
    r.loss = total / N;
    check(std::isfinite(r.loss), "cross_entropy: loss diverged (non-finite)");
    return r;
}

InfoNCEResult infonce_loss(const Tensor& anchors, const Tensor& positives,
                           const Tensor& negatives, double tau) {
    check(tau > 0, "infonce_loss: tau must be positive, got ", tau);
    MatrixXd a = to_double(anchors), p = to_double(positives), n = to_double(negatives);
    check(a.rows() == p.rows() && a.cols() == p.cols(),
          "infonce_loss: anchor/positive shape mismatch");
    check(a.cols() == n.cols(), "infonce_loss: negative dimension mismatch");
    check(n.rows() >= 1, "infonce_loss: need at least one negative");
    const int N = static_cast<int>(a.rows()), M = static_cast<int>(n.rows());

    VectorXd na, np, nn;
    MatrixXd ah = normalize_rows(a, na), ph = normalize_rows(p, np), nh = normalize_rows(n, nn);

    MatrixXd gah = MatrixXd::Zero(N, a.cols());
    MatrixXd gph = MatrixXd::Zero(N, a.cols());
    MatrixXd gnh = MatrixXd::Zero(M, a.cols());

    InfoNCEResult r;
    r.per_anchor.resize(N);
    double total = 0.0;
    const VectorXd spos = (ah.array() * ph.array()).rowwise().sum();
    const MatrixXd sneg = ah * nh.transpose();  // N x M
    for (int i = 0; i < N; ++i) {
        // softmax over [pos, negs] / tau
        double mx = spos[i];
        for (int j = 0; j < M; ++j) mx = std::max(mx, sneg(i, j));
        double z = std::exp((spos[i] - mx) / tau);
        for (int j = 0; j < M; ++j) z += std::exp((sneg(i, j) - mx) / tau);
        const double li = -((spos[i] - mx) / tau - std::log(z));
        r.per_anchor[i] = li;
        total += li;

        const double qpos = std::exp((spos[i] - mx) / tau) / z;
        const double wpos = (qpos - 1.0) / (tau * N);
        gah.row(i) += wpos * ph.row(i);
        gph.row(i) += wpos * ah.row(i);
        for (int j = 0; j < M; ++j) {
            const double qj = std::exp((sneg(i, j) - mx) / tau) / z;
            const double wj = qj / (tau * N);
            gah.row(i) += wj * nh.row(j);
            gnh.row(j) += wj * ah.row(i);
        }
    }
    r.loss = total / N;
    check(std::isfinite(r.loss), "infonce_loss: loss diverged (non-finite)");
    r.ganchor = to_tensor(denormalize_grad(gah, ah, na));
    r.gpositive = to_tensor(denormalize_grad(gph, ph, np));
    r.gnegative = to_tensor(denormalize_grad(gnh, nh, nn));
    return r;
}

NTXentResult ntxent_loss(const Tensor& z, double tau) {
    check(tau > 0, "ntxent_loss: tau must be positive, got ", tau);
    MatrixXd zm = to_double(z);
    const int R = static_cast<int>(zm.rows());
    check(R >= 4 && R % 2 == 0, "ntxent_loss: need an even number (>= 4) of view rows, got ", R);

    VectorXd norms;
    MatrixXd zh = normalize_rows(zm, norms);
    MatrixXd sim = zh * zh.transpose();  // R x R

    MatrixXd w = MatrixXd::Zero(R, R);  // dL/ds_ij
    NTXentResult r;
    r.per_sample.assign(R / 2, 0.0);
    double total = 0.0;
    for (int i = 0; i < R; ++i) {
        const int partner = i ^ 1;
        double mx = -2.0;
        for (int j = 0; j < R; ++j)
            if (j != i) mx = std::max(mx, sim(i, j));
        double zsum = 0.0;
        for (int j = 0; j < R; ++j)
            if (j != i) zsum += std::exp((sim(i, j) - mx) / tau);
        const double li = -((sim(i, partner) - mx) / tau - std::log(zsum));
        total += li;
        r.per_sample[i / 2] += 0.5 * li;
        for (int j = 0; j < R; ++j) {
            if (j == i) continue;
            const double q = std::exp((sim(i, j) - mx) / tau) / zsum;
            w(i, j) = (q - (j == partner ? 1.0 : 0.0)) / (tau * R);
        }
    }
    r.loss = total / R;
    check(std::isfinite(r.loss), "ntxent_loss: loss diverged (non-finite)");
    MatrixXd ghat = (w + w.transpose()) * zh;
    r.gz = to_tensor(denormalize_grad(ghat, zh, norms));
    return r;
}

ByolResult byol_loss(const Tensor& pred, const Tensor& target) {
    MatrixXd q = to_double(pred), t = to_double(target);
    check(q.rows() == t.rows() && q.cols() == t.cols(), "byol_loss: shape mismatch");
    const int N = static_cast<int>(q.rows());
    VectorXd nq, nt;
    MatrixXd qh = normalize_rows(q, nq), th = normalize_rows(t, nt);

    ByolResult r;
    r.per_sample.resize(N);
    MatrixXd ghat(N, q.cols());
    double total = 0.0;
    for (int i = 0; i < N; ++i) {
        const double dot = qh.row(i).dot(th.row(i));
        r.per_sample[i] = 2.0 - 2.0 * dot;
        total += r.per_sample[i];
        ghat.row(i) = (-2.0 / N) * th.row(i);
    }
    r.loss = total / N;
    check(std::isfinite(r.loss), "byol_loss: loss diverged (non-finite)");
    r.gpred = to_tensor(denormalize_grad(ghat, qh, nq));
    return r;
}

MocoResult moco_loss(const Tensor& query, const Tensor& key, const Tensor& queue, double tau) {
    check(tau > 0, "moco_loss: tau must be positive, got ", tau);
    MatrixXd q = to_double(query), k = to_double(key), mem = to_double(queue);
    check(q.rows() == k.rows() && q.cols() == k.cols(), "moco_loss: query/key shape mismatch");
    check(mem.cols() == q.cols(), "moco_loss: queue dimension mismatch");
    check(mem.rows() >= 1, "moco_loss: queue must be non-empty");
    const int N = static_cast<int>(q.rows()), M = static_cast<int>(mem.rows());

    VectorXd nq, nk, nm;
    MatrixXd qh = normalize_rows(q, nq), kh = normalize_rows(k, nk),
             mh = normalize_rows(mem, nm);

    MocoResult r;
    r.per_sample.resize(N);
    MatrixXd ghat = MatrixXd::Zero(N, q.cols());
    const VectorXd spos = (qh.array() * kh.array()).rowwise().sum();
    const MatrixXd sneg = qh * mh.transpose();
    double total = 0.0;
    for (int i = 0; i < N; ++i) {
        double mx = spos[i];
        for (int j = 0; j < M; ++j) mx = std::max(mx, sneg(i, j));
        double zsum = std::exp((spos[i] - mx) / tau);
        for (int j = 0; j < M; ++j) zsum += std::exp((sneg(i, j) - mx) / tau);
        const double li = -((spos[i] - mx) / tau - std::log(zsum));
        r.per_sample[i] = li;
        total += li;
        const double qpos = std::exp((spos[i] - mx) / tau) / zsum;
        ghat.row(i) += ((qpos - 1.0) / (tau * N)) * kh.row(i);
        for (int j = 0; j < M; ++j) {
            const double qj = std::exp((sneg(i, j) - mx) / tau) / zsum;
            ghat.row(i) += (qj / (tau * N)) * mh.row(j);
        }
    }
    r.loss = total / N;
    check(std::isfinite(r.loss), "moco_loss: loss diverged (non-finite)");
    r.gquery = to_tensor(denormalize_grad(ghat, qh, nq));
    return r;
}

}  // namespace backlab::nn
