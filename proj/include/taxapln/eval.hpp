#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "taxapln/augment.hpp"
#include "taxapln/ingest.hpp"
#include "taxapln/metrics.hpp"
#include "taxapln/model.hpp"

namespace taxapln {

// ---------------------------------------------------------------------------
// Classifiers (binary labels 0/1 for logistic regression, any M for the MLP)

/// L2-penalised logistic regression on the mean loss
///   (1/n) sum BCE(x_i w + b, y_i) + ||w||^2 / (2 C),
/// bias unpenalised, solved by damped Newton steps.
struct LogisticRegression {
    Eigen::VectorXd weights;
    double bias = 0.0;
    int iterations = 0;
    double gradient_norm = 0.0;

    static LogisticRegression fit(const Eigen::MatrixXd& x, const std::vector<int>& y, double c = 1.0,
                                  int max_iter = 100, double tol = 1e-6);
    /// P(y = 1).
    Eigen::VectorXd predict(const Eigen::MatrixXd& x) const;
};

double logistic_objective(const Eigen::MatrixXd& x, const std::vector<int>& y, const Eigen::VectorXd& w, double b,
                          double c);
/// Gradient in (w, b) order.
Eigen::VectorXd logistic_gradient(const Eigen::MatrixXd& x, const std::vector<int>& y, const Eigen::VectorXd& w,
                                  double b, double c);

struct MlpConfig {
    std::vector<int> hidden{256, 128};
    int max_iter = 200;
    double learning_rate = 1e-3;
    double alpha = 1e-4;  ///< L2 on the weights, scaled by 1 / (2 n_batch)
    int batch_size = 200;
    /// Stops once the epoch loss fails to improve by tol for this many epochs (0 disables).
    double tol = 1e-4;
    int n_iter_no_change = 10;
};

void to_json(nlohmann::json& j, const MlpConfig& c);
void from_json(const nlohmann::json& j, MlpConfig& c);

/// ReLU network with a softmax output trained on cross-entropy with Adam.
struct Mlp {
    std::vector<ad::Parameter> weights, biases;
    std::vector<double> loss_trace;  ///< mean training loss per epoch
    int classes = 2;

    static Mlp fit(const Eigen::MatrixXd& x, const std::vector<int>& y, int classes, const MlpConfig& config,
                   std::uint64_t seed);
    /// n x classes probabilities.
    Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& x) const;
};

// ---------------------------------------------------------------------------
// Cross-validation

/// Fold id per sample. Each label's members are shuffled and dealt
/// round-robin, so per-fold label counts differ from exact proportions by at most one.
std::vector<int> stratified_folds(const std::vector<int>& labels, int folds, Rng& rng);

struct CvConfig {
    int folds = 5;
    int repeats = 25;
    std::uint64_t seed = 0;
    double beta = 2.0;
    /// "none" (the raw baseline) is always evaluated and placed first.
    std::vector<std::string> strategies{"none", "taxapln"};
    std::string preprocessing = "clr";  ///< clr | proportions
    std::vector<std::string> classifiers{"logreg", "mlp"};
    /// Strategy tested against every other one in the report.
    std::string reference = "taxapln";
    /// Training rows kept per label, as a fraction of that label in the full cohort.
    double train_fraction = 1.0;
    double clr_pseudocount = 1.0;
    double logreg_c = 1.0;
    MlpConfig mlp;
    ModelConfig model;
    TrainConfig train{1e-3, 5.0, 512, 2000, 1, 0};
    AugmentOptions augment;
    std::vector<CovariateField> covariate_schema = default_covariate_schema();
    int jobs = 1;
    /// When set, every training fold (augmented) and test fold is written here as TSV.
    std::string export_dir;
};

void to_json(nlohmann::json& j, const CvConfig& c);
void from_json(const nlohmann::json& j, CvConfig& c);
void validate(const CvConfig& c);

struct BenchmarkResult {
    std::vector<std::string> classifiers;
    std::vector<std::string> strategies;
    int repeats = 0, folds = 0;
    /// [classifier][strategy][repeat][fold]
    std::vector<std::vector<std::vector<std::vector<double>>>> fold_auprc;

    /// Mean over folds for every repeat.
    std::vector<double> repeat_means(std::size_t classifier, std::size_t strategy) const;
    std::size_t strategy_index(const std::string& name) const;
    std::size_t classifier_index(const std::string& name) const;
};

BenchmarkResult cross_validate(const Cohort& cohort, const CvConfig& config);

struct StrategySummary {
    std::string strategy;
    double mean = 0.0, se = 0.0, ci_low = 0.0, ci_high = 0.0;
    /// Against the reference (reference > this strategy), absent for the reference itself.
    bool tested = false;
    std::string compared_to;
    TestResult test;
    std::string stars;
};

struct ClassifierSummary {
    std::string classifier;
    std::vector<StrategySummary> strategies;
};

struct BenchmarkReport {
    std::string reference;
    int repeats = 0, folds = 0;
    std::vector<ClassifierSummary> classifiers;

    nlohmann::json to_json() const;
};

/// Mean +- 1.96 SE per strategy, one-tailed paired t-tests of the reference
/// against each other strategy. Without the reference every strategy is
/// tested against the raw baseline instead.
BenchmarkReport benchmark_report(const BenchmarkResult& result, const std::string& reference);

/// classifier,strategy,repeat,fold,auprc (fold = "mean" rows hold the repeat means).
void write_results_csv(std::ostream& out, const BenchmarkResult& result);

struct CurveRow {
    double x = 0.0;  ///< fraction or beta
    std::string classifier;
    std::string strategy;
    StrategySummary summary;
};

/// Raw vs augmented AUPRC while the training folds are subsampled.
std::vector<CurveRow> subsample_study(const Cohort& cohort, const CvConfig& config, const std::vector<double>& fractions,
                                      const std::string& strategy, const std::string& classifier);

/// One benchmark per beta over the configured strategies and classifiers.
std::vector<CurveRow> beta_sweep(const Cohort& cohort, const CvConfig& config, const std::vector<double>& betas);

void write_curve_csv(std::ostream& out, const std::vector<CurveRow>& rows, const std::string& x_name);

}  // namespace taxapln
