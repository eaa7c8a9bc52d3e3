#pragma once
// Loss functions with hand-derived gradients. Similarities, softmaxes and
// reductions run in double; inputs are defensively L2-normalized where the
// loss is defined on directions, and gradients flow through that
// normalization.

#include "backlab/tensor.hpp"

namespace backlab::nn {

struct CEResult {
    double loss = 0.0;                // mean over rows
    std::vector<double> per_sample;   // unreduced
    Tensor glogits;                   // d(mean loss)/d logits
    std::vector<int> predictions;
    std::vector<double> max_prob;     // confidence of the argmax
};
CEResult cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                       bool need_grad = true);

// InfoNCE with per-anchor positives and a shared negative set:
//   l_i = -log exp(s+_i/tau) / (exp(s+_i/tau) + sum_j exp(s-_ij/tau))
struct InfoNCEResult {
    double loss = 0.0;
    std::vector<double> per_anchor;
    Tensor ganchor, gpositive, gnegative;
};
InfoNCEResult infonce_loss(const Tensor& anchors, const Tensor& positives,
                           const Tensor& negatives, double tau);

// Batch-symmetric InfoNCE over 2B views; rows (2b, 2b+1) are the two views of
// sample b, and each anchor uses the other 2(B-1) rows... plus its partner in
// the denominator.
struct NTXentResult {
    double loss = 0.0;
    std::vector<double> per_sample;  // per original sample (mean of its two anchors)
    Tensor gz;
};
NTXentResult ntxent_loss(const Tensor& z, double tau);

// ||q_hat - z_hat||^2 with a stop-gradient target.
struct ByolResult {
    double loss = 0.0;
    std::vector<double> per_sample;
    Tensor gpred;
};
ByolResult byol_loss(const Tensor& pred, const Tensor& target);

// InfoNCE against a momentum queue; gradients reach the query only.
struct MocoResult {
    double loss = 0.0;
    std::vector<double> per_sample;
    Tensor gquery;
};
MocoResult moco_loss(const Tensor& query, const Tensor& key, const Tensor& queue, double tau);

}  // namespace backlab::nn
