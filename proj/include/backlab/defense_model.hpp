#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "backlab/defense_data.hpp"

namespace backlab::defense {

struct PruneStep {
    double x = 0.0;  // sweep variable: channels pruned or u value
    double acc = 0.0;
    double asr = 0.0;
    int pruned = 0;  // total channels zeroed at this step
};

struct PruneReport {
    std::string method;
    nlohmann::json params;
    std::vector<PruneStep> rows;  // ordered by the sweep variable
    double chosen_x = 0.0, chosen_acc = 0.0, chosen_asr = 0.0;
    bool degenerate = false;

    void save_csv(const std::string& path) const;  // x,pruned,acc,asr
    void save_json(const std::string& path) const;
};

// Evaluation callback: returns (clean accuracy, attack success rate).
using EvalFn = std::function<std::pair<double, double>(nn::Classifier&)>;

// Ranks penultimate channels by mean |activation| over the validation set
// (ascending) and zeroes the corresponding head columns cumulatively, from 0 to
// max_channels, re-evaluating every `stride` channels. The input model is left
// untouched; pruning happens on an internal copy.
PruneReport fine_prune(const nn::Classifier& clf, const data::ImageDataset& clean_validation,
                       int max_channels, int stride, const EvalFn& eval_fn);

// ---- data-free channel pruning ---------------------------------------------------------

// Largest singular value via power iteration on A^T A.
double spectral_norm_power(const Eigen::MatrixXd& a, double tol = 1e-9, int max_iters = 1000);

struct UclcEntry {
    std::string layer;  // "conv<i>" in visit order
    int channel = 0;
    double value = 0.0;
};

// Per conv output channel: spectral norm of the kernel reshaped to
// (c_in_per_group, k*k), scaled by |gamma|/sqrt(running_var+eps) when a
// batch-norm immediately follows. Non-conv layers are skipped.
std::vector<UclcEntry> clp_uclc(nn::Backbone& bb);

// Zeroes channels whose UCLC exceeds (mu + u*sigma) of their layer, in place
// (conv kernel plus trailing batch-norm scale/shift). eval_fn may be empty.
PruneStep clp_prune(nn::Classifier& clf, double u, const EvalFn& eval_fn);

struct SgParams {
    int window = 5;
    int order = 2;
};

// Least-squares local polynomial smoothing with mirror-padded boundaries.
std::vector<double> savitzky_golay(const std::vector<double>& series, int window, int order);

// Sweeps u over the grid, smooths the ACC curve, picks the u at the maximum
// second difference of the smoothed curve (grid midpoint if the curve is flat)
// and reports the pruned operating point.
PruneReport clp_knee(const nn::Classifier& clf, const std::vector<double>& u_grid,
                     const EvalFn& eval_fn, const SgParams& sg = {});

// Clone-and-prune at a fixed u; used once the knee has been chosen.
nn::Classifier clp_apply(const nn::Classifier& clf, double u);

// ---- trigger reverse engineering ---------------------------------------------------------

struct NCParams {
    double lambda_init = 1e-3;
    int steps = 100;
    double lr = 0.1;
    double success_target = 0.99;  // pool success rate steering the lambda schedule
    double anomaly_threshold = 2.0;
    int batch = 64;
    std::uint64_t seed = 1;
};

struct NCClassResult {
    int cls = 0;
    double mask_l1 = 0.0;
    double anomaly = 0.0;
    bool flagged = false;
    bool diverged = false;
    Image mask;     // h x w x 1, entries in [0,1]
    Image pattern;  // h x w x c
};

struct NCResult {
    std::vector<NCClassResult> classes;
    std::vector<int> flagged;
    double median_l1 = 0.0, mad_l1 = 0.0;
    double mad_scale = 1.4826;

    void save(const std::string& dir) const;  // PNG masks/patterns + norms JSON
};

// MAD-normalized deviation of each norm from the median.
std::vector<double> nc_anomaly_indices(const std::vector<double>& norms);

// Per candidate class: optimize a tanh-parameterized (mask, pattern) pair that
// steers the pool toward that class under CE + lambda*L1(mask); classes whose
// final mask norm is an outlier below the median are flagged.
NCResult neural_cleanse(nn::Classifier& clf, const data::ImageDataset& sample_pool,
                        const NCParams& params = {});

// ---- fine-tuning -----------------------------------------------------------------------

struct FtOutcome {
    double clean_acc = 0.0;
    double triggered_acc = 0.0;
    double drop = 0.0;  // clean_acc - triggered_acc; 0 when no trigger set given
};

// Fits a downstream head (or fine-tunes the stack) on dataset B and reports the
// accuracy drop between clean and triggered B test inputs (true labels).
FtOutcome fine_tune_defense(const nn::EncoderModel& enc, const data::ImageDataset& train_b,
                            const data::ImageDataset& test_b,
                            const data::ImageDataset* triggered_test_b,
                            const train::DownstreamConfig& cfg);

// ---- ensemble --------------------------------------------------------------------------

struct EnsembleParams {
    ClusteringParams filter;
    std::vector<double> u_grid{0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0};
    SgParams sg;
};

// Rebuilds a classifier from the surviving row subset.
using RetrainFn = std::function<nn::Classifier(const std::vector<int>& keep_rows)>;

struct EnsembleOutcome {
    DefenseReport filter_report;
    PruneReport prune_report;
    double pre_acc = 0.0, pre_asr = 0.0;
    double retrain_acc = 0.0, retrain_asr = 0.0;
    double final_acc = 0.0, final_asr = 0.0;

    void save_json(const std::string& path) const;
};

// density filter -> drop flagged rows -> retrain -> knee-selected channel
// pruning. Stage failures are rethrown with the stage name attached.
EnsembleOutcome ensemble_defense(const analysis::FeatureBank& bank,
                                 const std::vector<bool>& truth,
                                 std::pair<double, double> pre_eval, const RetrainFn& retrain,
                                 const EvalFn& eval_fn, const EnsembleParams& params);

}  // namespace backlab::defense
