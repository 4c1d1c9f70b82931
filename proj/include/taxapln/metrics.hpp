#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "taxapln/error.hpp"
#include "taxapln/taxonomy.hpp"

namespace taxapln {

// ---------------------------------------------------------------------------
// Alpha diversity on one composition (any shape, read as a flat vector)

/// Shannon entropy in nats; zero entries are skipped.
template <typename Derived>
double shannon_index(const Eigen::MatrixBase<Derived>& p) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double v = p.derived().coeff(i);
        if (v > 0.0) h -= v * std::log(v);
    }
    return h;
}

/// Gini-Simpson form, 1 - sum p^2.
template <typename Derived>
double simpson_index(const Eigen::MatrixBase<Derived>& p) {
    return 1.0 - p.derived().template cast<double>().squaredNorm();
}

// ---------------------------------------------------------------------------
// Beta diversity

/// 1 - sum_k min(p_k, q_k) on two compositions.
template <typename A, typename B>
double bray_curtis(const Eigen::MatrixBase<A>& p, const Eigen::MatrixBase<B>& q) {
    if (p.size() != q.size()) throw DataError("LengthMismatch", "Bray-Curtis needs vectors of equal length");
    double shared = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) shared += std::min<double>(p.derived().coeff(i), q.derived().coeff(i));
    return 1.0 - shared;
}

/// Euclidean distance between CLR transforms of two count vectors.
template <typename A, typename B>
double aitchison_distance(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& y, double pseudocount = 1.0) {
    if (x.size() != y.size()) throw DataError("LengthMismatch", "Aitchison distance needs vectors of equal length");
    auto clr = [pseudocount](const auto& v) {
        Eigen::ArrayXd s(v.size());
        for (Eigen::Index i = 0; i < v.size(); ++i) s(i) = static_cast<double>(v.derived().coeff(i)) + pseudocount;
        if ((s <= 0.0).any())
            throw DataError("NonPositiveEntry", "Aitchison distance needs positive entries; use a pseudocount");
        const Eigen::ArrayXd l = s.log();
        return Eigen::ArrayXd(l - l.mean());
    };
    return std::sqrt((clr(x) - clr(y)).square().sum());
}

/// Row proportions; all-zero rows stay zero (an empty community).
Eigen::MatrixXd safe_proportions(const Eigen::MatrixXd& counts);

Eigen::VectorXd shannon_rows(const Eigen::MatrixXd& proportions);
Eigen::VectorXd simpson_rows(const Eigen::MatrixXd& proportions);

/// Pairwise matrices over the rows (samples) of the input.
Eigen::MatrixXd bray_curtis_matrix(const Eigen::MatrixXd& proportions);
Eigen::MatrixXd aitchison_matrix(const Eigen::MatrixXd& counts, double pseudocount = 1.0);

struct PcoaResult {
    Eigen::MatrixXd coordinates;  ///< n x k; missing axes are zero columns
    Eigen::VectorXd eigenvalues;  ///< all n eigenvalues of the centred matrix, descending
    bool rank_deficient = false;  ///< fewer than k positive eigenvalues
};

/// Classical scaling of a distance matrix into k dimensions.
PcoaResult pcoa(const Eigen::MatrixXd& distances, int k);

// ---------------------------------------------------------------------------
// Tests

struct TestResult {
    double statistic = 0.0;
    double p_value = 1.0;
    bool degenerate = false;
    int direction = 0;  ///< sign of the effect for degenerate paired tests
};

/// Two-sided rank-sum test. The statistic is U of the first sample; p uses
/// the normal approximation with tie correction and continuity correction.
TestResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b);

/// sup_t |F_a(t) - F_b(t)|.
double ks_divergence(const std::vector<double>& a, const std::vector<double>& b);

/// One-tailed paired t-test of mean(a - b) > 0.
TestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

/// Step-interpolated average precision; tied scores share one threshold.
double auprc(const std::vector<double>& scores, const std::vector<int>& labels);

/// "****" p <= 1e-4, "***" <= 1e-3, "**" <= 1e-2, "*" <= 0.05, else "ns".
std::string significance_stars(double p);

// ---------------------------------------------------------------------------
// Diversity report

struct StrategyDiversity {
    std::string name;
    Eigen::VectorXd shannon, simpson;
    TestResult shannon_test, simpson_test;
    double shannon_ks = 0.0, simpson_ks = 0.0;
    /// Coordinates of [original; synthetic] rows.
    PcoaResult aitchison, bray_curtis;
    Eigen::Index synthetic_rows = 0;
};

struct DiversityReport {
    Eigen::VectorXd original_shannon, original_simpson;
    Eigen::Index original_rows = 0;
    std::vector<StrategyDiversity> strategies;

    nlohmann::json to_json() const;
};

/// Leaf-level diversity of each synthetic set against the original cohort.
DiversityReport diversity_report(const CountMatrix& original,
                                 const std::vector<std::pair<std::string, CountMatrix>>& synthetic, int pcoa_dims = 2,
                                 double pseudocount = 1.0);

/// diversity.json, pcoa.csv and alpha_diversity.csv under `directory`.
void write_diversity_report(const DiversityReport& report, const std::string& directory);

}  // namespace taxapln
