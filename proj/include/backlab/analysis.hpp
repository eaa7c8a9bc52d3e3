#pragma once
// Attack diagnostics: accuracy / attack-success evaluation, representation
// entanglement, mutual-information estimation, class-distance summaries,
// loss-dynamics comparison, and strength sweeps.

#include <Eigen/Dense>
#include <functional>

#include "backlab/backbone.hpp"
#include "backlab/dataset.hpp"
#include "backlab/feature_bank.hpp"
#include "backlab/train.hpp"

namespace backlab::analysis {

// Bank of backbone features for a dataset (eval mode, no augmentation).
FeatureBank bank_from_dataset(nn::EncoderModel& enc, const data::ImageDataset& ds,
                              const std::vector<bool>& poison_flags, int batch_size);

struct EvalResult {
    double acc = 0.0;  // clean test accuracy
    double asr = 0.0;  // fraction of off-target triggered rows classified as target
    int n_clean = 0, n_trigger = 0;
};
EvalResult evaluate_acc_asr(nn::Classifier& clf, const data::ImageDataset& clean_test,
                            const data::ImageDataset& trigger_test, int target_class,
                            int batch_size = 256);

std::vector<int> predict(nn::Classifier& clf, const data::ImageDataset& ds,
                         int batch_size = 256);

// ---- entanglement ratio ------------------------------------------------------

struct ERParams {
    int k = 50;          // neighbors
    int per_class = 800; // bank rows sampled per class (and poisoned rows)
    int m_test = 1000;   // clean target-class probes
    std::uint64_t seed = 1;
};

struct ERReport {
    ERParams params;
    int target_class = 0;
    int num_classes = 0;
    std::vector<double> per_class;   // size C+1; index C = poisoned pseudo-class
    std::vector<int> bank_counts;    // rows actually sampled per class (C+1)
    int probes_used = 0;

    double pseudo_class_er() const { return per_class.back(); }
    void save_json(const std::string& path) const;
};

// Mean fraction of the k nearest bank rows (by L2 distance, ties broken by
// index) that fall in each class, averaged over clean target-class probes
// drawn from `test_bank`. Per-class ratios sum to 1.
ERReport entanglement_ratio(const FeatureBank& train_bank, const FeatureBank& test_bank,
                            int target_class, const ERParams& params);

// ---- mutual information --------------------------------------------------------

struct MIEstimate {
    double mi_nats = 0.0;
    int n = 0, k = 0;
    bool degenerate = false;  // X and X' identical up to jitter (zero-strength runs)
    void save_json(const std::string& path) const;
};

// Nearest-neighbor estimator, variant with per-marginal rectangles:
//   I = psi(k) - 1/k - <psi(n_x) + psi(n_y)> + psi(N)
// Joint neighborhoods use the max of the two subspace L2 distances; a tiny
// uniform jitter (deterministic in jitter_seed) breaks ties.
MIEstimate ksg_mutual_information(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, int k = 5,
                                  std::uint64_t jitter_seed = 1, double jitter = 1e-10);

// Convenience: MI between clean-input features and triggered-input features
// of the same rows (subsampled to at most max_n rows).
MIEstimate representation_mi(const FeatureBank& clean, const FeatureBank& triggered, int k = 5,
                             int max_n = 2000, std::uint64_t seed = 1);

// ---- class distance matrix -------------------------------------------------------

// (C+1)x(C+1) mean pairwise feature distances between class groups (pseudo-
// class last). Diagonal entries need at least two rows in the group.
Eigen::MatrixXd pairwise_distance_matrix(const FeatureBank& bank, bool normalize);

// ---- dynamics ---------------------------------------------------------------------

struct DynamicsComparison {
    int half_life_clean = 0;   // first epoch at or below the clean midpoint
    int half_life_poison = 0;
    double separation_score = 0.0;  // mean over epochs of (clean - poison)/clean
};
DynamicsComparison compare_dynamics(const train::DynamicsLog& log);

// ---- strength sweep -----------------------------------------------------------------

struct SweepPoint {
    double strength = 0.0;
    double acc = 0.0, asr = 0.0;
    double mi_nats = 0.0;
    double er_pseudo = 0.0;
    bool ok = false;
    std::string error;
};

// Runs `run_point` per grid value; a failing point is recorded and the sweep
// continues.
std::vector<SweepPoint> trigger_strength_sweep(const std::vector<double>& grid,
                                               const std::function<SweepPoint(double)>& run_point);
void save_sweep_csv(const std::vector<SweepPoint>& rows, const std::string& path);

}  // namespace backlab::analysis
