#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "backlab/feature_bank.hpp"
#include "backlab/train.hpp"
#include "json.hpp"

namespace backlab::defense {

using analysis::FeatureBank;

struct ReportRow {
    double threshold = 0.0;  // threshold or isolation rate, depending on the defense
    double tpr = 0.0;
    double fpr = 0.0;
};

struct DefenseReport {
    std::string defense;
    nlohmann::json params;
    std::vector<ReportRow> rows;
    std::vector<int> flagged;  // sorted ascending
    nlohmann::json aux;

    void save_json(const std::string& path) const;
    static DefenseReport load_json(const std::string& path);
};

// TPR/FPR of a flagged set against ground truth.
ReportRow rates_at(const std::vector<int>& flagged, const std::vector<bool>& truth,
                   double threshold);

// ---- loss-based isolation ----------------------------------------------------------

struct AblParams {
    std::vector<double> rate_grid{0.005, 0.01, 0.02, 0.05, 0.10};
    double isolation_rate = 0.01;  // operating point for the flagged set
    int early_epochs = 10;         // losses averaged over the first min(this, E) epochs
};

// Ranks samples by mean early-epoch loss (ascending) and flags the lowest ceil(r*N).
DefenseReport abl_isolate(const train::DynamicsLog& log, const std::vector<bool>& truth,
                          const AblParams& params = {});

// Unlearning threshold placed `ratio` of the way down the total loss drop.
double abl_gamma(double loss_init, double loss_final, double ratio = 0.5);

// Gradient ascent on flagged samples whose current loss is below gamma.
void abl_unlearn(nn::Classifier& clf, const data::ImageDataset& ds,
                 const std::vector<int>& flagged, double gamma, int epochs, double lr,
                 std::uint64_t seed);

// ---- activation clustering -----------------------------------------------------------

struct ACParams {
    int pca_dim = 10;
    int kmeans_iters = 100;
    std::uint64_t seed = 1;
};

// Rows of x projected onto the top `dim` principal components (x is centered first).
Eigen::MatrixXd pca_project(const Eigen::MatrixXd& x, int dim);

// Seeded kmeans++ initialization followed by Lloyd iterations; returns 0/1 assignment.
std::vector<int> kmeans2(const Eigen::MatrixXd& x, int iters, Rng& rng);

// Mean silhouette over all points for an arbitrary cluster assignment.
double silhouette_score(const Eigen::MatrixXd& x, const std::vector<int>& assign);

// Per assigned class: PCA -> 2-means -> silhouette; the class with the highest
// silhouette is the suspected target and its smaller cluster is flagged.
DefenseReport activation_clustering(const FeatureBank& bank, const std::vector<bool>& truth,
                                    const ACParams& params = {});

// ---- mixture test on class statistics -------------------------------------------------

struct ScanParams {
    double cov_reg = 1e-4;       // added to the covariance diagonal
    int em_iters = 50;
    double class_threshold = 2.0;  // robust index above which a class is flagged
    std::vector<double> fpr_grid{0.005, 0.01, 0.02};
};

// Shared within-class covariance from `reference`; per class, likelihood ratio of a
// two-mean mixture (EM, fixed covariance) against a single Gaussian. Classes whose
// statistic is a MAD outlier are flagged; their minority-component members become the
// flagged samples, and per-sample minority posteriors are swept over the FPR grid.
DefenseReport scan_lite(const FeatureBank& bank, const FeatureBank& reference,
                        const std::vector<bool>& truth, const ScanParams& params = {});

// ---- perturbation-entropy detection ----------------------------------------------------

struct StripParams {
    int n_overlays = 100;
    double alpha = 0.5;  // blend weight of the input; overlay gets 1-alpha
    std::vector<double> fpr_grid{0.005, 0.01, 0.02};
    int operating_row = 1;  // grid row whose threshold produces the flagged set
    std::uint64_t seed = 1;
    int batch = 256;
};

double shannon_entropy_bits(const std::vector<double>& probs);

// Mean prediction entropy of each input under n_overlays random clean-image blends.
std::vector<double> strip_entropies(nn::Classifier& clf, const std::vector<Image>& inputs,
                                    const std::vector<Image>& overlays,
                                    const StripParams& params);

// Thresholds calibrated on clean_validation entropies to each FPR in the grid; inputs
// whose entropy falls below threshold are flagged.
DefenseReport strip_detect(nn::Classifier& clf, const data::ImageDataset& inputs,
                           const std::vector<bool>& truth,
                           const data::ImageDataset& overlay_set,
                           const data::ImageDataset& clean_validation,
                           const StripParams& params = {});

// ---- confidence filtering ---------------------------------------------------------------

struct BddParams {
    double threshold = 0.5;
    bool use_percentile = false;
    double percentile = 0.05;  // flag the lowest-confidence fraction when enabled
    int batch = 256;
};

std::vector<double> confidence_scores(nn::Classifier& clf, const data::ImageDataset& ds,
                                      int batch);

// Flags training inputs whose max-softmax confidence falls below the threshold; the aux
// block carries confidence histograms of poisoned vs clean target-class inputs.
DefenseReport bdd_confidence_filter(nn::Classifier& clf, const data::ImageDataset& train_inputs,
                                    const std::vector<bool>& truth, int target_class,
                                    const BddParams& params = {});

// ---- density filtering --------------------------------------------------------------------

struct ClusteringParams {
    double eps = 0.3;
    int n_min = 30;
    int top_j = 1;  // number of densest clusters to flag
    void validate() const;
};

// Deterministic DBSCAN: core points have >= n_min points (self included) within eps;
// clusters are connected components of core points; border points join the cluster of
// their nearest core point (lowest index on ties). Label -1 marks noise. This variant is
// independent of row order up to cluster renumbering.
struct DbscanResult {
    std::vector<int> labels;
    int num_clusters = 0;
};
DbscanResult dbscan(const FeatureBank& bank, double eps, int n_min);

// Mean distance of every row to its K nearest other rows.
std::vector<double> mean_k_distances(const FeatureBank& bank, int K);

struct KneeResult {
    double epsilon = 0.0;
    int index = 0;        // position in the sorted curve
    bool degenerate = false;
    std::vector<double> smoothed;
};

// Knee of an ascending curve: moving-average smoothing (window max(5, N/200)) followed
// by the maximum-magnitude second difference.
KneeResult k_distance_knee_curve(const std::vector<double>& sorted_means);
KneeResult k_distance_knee(const FeatureBank& bank, int K);

// DBSCAN over features; flags the members of the top_j densest clusters, where a
// cluster's density is 1 / (mean member K-distance), K = n_min.
DefenseReport density_filter(const FeatureBank& bank, const std::vector<bool>& truth,
                             const ClusteringParams& params);

}  // namespace backlab::defense
