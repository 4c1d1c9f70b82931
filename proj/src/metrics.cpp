#include "taxapln/metrics.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

namespace taxapln {

Eigen::MatrixXd safe_proportions(const Eigen::MatrixXd& counts) {
    Eigen::MatrixXd out = counts;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const double s = out.row(i).sum();
        if (s > 0.0) out.row(i) /= s;
    }
    return out;
}

Eigen::VectorXd shannon_rows(const Eigen::MatrixXd& p) {
    Eigen::VectorXd out(p.rows());
    for (Eigen::Index i = 0; i < p.rows(); ++i) out(i) = shannon_index(p.row(i));
    return out;
}

Eigen::VectorXd simpson_rows(const Eigen::MatrixXd& p) {
    Eigen::VectorXd out(p.rows());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        // an empty community has no diversity rather than 1 - 0
        out(i) = p.row(i).sum() > 0.0 ? simpson_index(p.row(i)) : 0.0;
    }
    return out;
}

Eigen::MatrixXd bray_curtis_matrix(const Eigen::MatrixXd& p) {
    const Eigen::Index n = p.rows();
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) d(i, j) = d(j, i) = bray_curtis(p.row(i), p.row(j));
    return d;
}

Eigen::MatrixXd aitchison_matrix(const Eigen::MatrixXd& counts, double pseudocount) {
    const Eigen::MatrixXd shifted = counts.array() + pseudocount;
    if ((shifted.array() <= 0.0).any())
        throw DataError("NonPositiveEntry", "Aitchison distance needs positive entries; use a pseudocount");
    Eigen::MatrixXd clr = shifted.array().log().matrix();
    const Eigen::VectorXd centre = clr.rowwise().mean();
    clr.colwise() -= centre;
    // ||a - b||^2 = |a|^2 + |b|^2 - 2 a.b, clipped at zero against cancellation
    const Eigen::VectorXd sq = clr.rowwise().squaredNorm();
    Eigen::MatrixXd g = clr * clr.transpose();
    const Eigen::Index n = counts.rows();
    Eigen::MatrixXd d(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        d(i, i) = 0.0;
        for (Eigen::Index j = i + 1; j < n; ++j) d(i, j) = d(j, i) = std::sqrt(std::max(0.0, sq(i) + sq(j) - 2.0 * g(i, j)));
    }
    return d;
}

PcoaResult pcoa(const Eigen::MatrixXd& distances, int k) {
    const Eigen::Index n = distances.rows();
    if (distances.cols() != n) throw DataError("ShapeMismatch", "distance matrix must be square");
    if (k < 1 || k >= n) throw ConfigError("InvalidDimension", "PCoA needs 1 <= k < n");
    if ((distances - distances.transpose()).cwiseAbs().maxCoeff() > 1e-12 || distances.diagonal().cwiseAbs().maxCoeff() != 0.0)
        throw DataError("NotADistanceMatrix", "distance matrix must be symmetric with a zero diagonal");

    // Gower centring B = -1/2 J D^2 J
    Eigen::MatrixXd b = -0.5 * distances.array().square().matrix();
    const Eigen::VectorXd row_mean = b.rowwise().mean();
    const Eigen::RowVectorXd col_mean = b.colwise().mean();
    const double grand = b.mean();
    b = ((b.colwise() - row_mean).rowwise() - col_mean).array() + grand;
    b = 0.5 * (b + b.transpose());

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(b);
    if (es.info() != Eigen::Success) throw NumericError("EigenFailure", "PCoA eigendecomposition failed");
    PcoaResult r;
    r.eigenvalues = es.eigenvalues().reverse();
    const Eigen::MatrixXd vectors = es.eigenvectors().rowwise().reverse();
    const double scale = std::max(1.0, r.eigenvalues.cwiseAbs().maxCoeff());
    r.coordinates = Eigen::MatrixXd::Zero(n, k);
    int taken = 0;
    for (int a = 0; a < k; ++a) {
        const double lambda = r.eigenvalues(a);
        if (!(lambda > 1e-10 * scale)) break;
        Eigen::VectorXd axis = vectors.col(a) * std::sqrt(lambda);
        Eigen::Index idx;
        axis.cwiseAbs().maxCoeff(&idx);
        if (axis(idx) < 0) axis = -axis;
        r.coordinates.col(a) = axis;
        ++taken;
    }
    r.rank_deficient = taken < k;
    return r;
}

// ---------------------------------------------------------------------------

namespace {

double normal_upper(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

/// Midranks of the concatenation a ++ b plus the tie term sum(t^3 - t).
std::pair<std::vector<double>, double> midranks(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return values[i] < values[j]; });
    std::vector<double> rank(n);
    double ties = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
        const double t = static_cast<double>(j - i + 1);
        ties += t * t * t - t;
        i = j + 1;
    }
    return {rank, ties};
}

}  // namespace

TestResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw DataError("EmptyInput", "Mann-Whitney needs two nonempty samples");
    std::vector<double> all(a);
    all.insert(all.end(), b.begin(), b.end());
    const auto [rank, ties] = midranks(all);
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size()), n = na + nb;
    const double ra = std::accumulate(rank.begin(), rank.begin() + static_cast<std::ptrdiff_t>(a.size()), 0.0);
    TestResult r;
    r.statistic = ra - na * (na + 1.0) / 2.0;
    const double mu = na * nb / 2.0;
    const double var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if (!(var > 0.0)) {
        r.degenerate = true;
        r.p_value = 1.0;
        return r;
    }
    const double z = (std::abs(r.statistic - mu) - 0.5) / std::sqrt(var);
    r.p_value = z <= 0.0 ? 1.0 : std::min(1.0, 2.0 * normal_upper(z));
    return r;
}

double ks_divergence(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.empty() || b.empty()) throw DataError("EmptyInput", "KS needs two nonempty samples");
    std::vector<double> x(a), y(b);
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    const double nx = static_cast<double>(x.size()), ny = static_cast<double>(y.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < x.size() && j < y.size()) {
        const double t = std::min(x[i], y[j]);
        while (i < x.size() && x[i] == t) ++i;
        while (j < y.size() && y[j] == t) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / nx - static_cast<double>(j) / ny));
    }
    // once one sample is exhausted its CDF is 1; the other only climbs towards 1
    if (i < x.size()) d = std::max(d, 1.0 - static_cast<double>(i) / nx);
    if (j < y.size()) d = std::max(d, 1.0 - static_cast<double>(j) / ny);
    return d;
}

TestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DataError("LengthMismatch", "paired t-test needs samples of equal length");
    if (a.size() < 2) throw DataError("TooFewPairs", "paired t-test needs at least two pairs");
    const std::size_t n = a.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (double v : d) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    TestResult r;
    // all differences equal (up to roundoff in the mean)
    if (!(sd > 1e-14 * std::max(1.0, std::abs(mean)))) {
        r.degenerate = true;
        r.direction = mean > 0 ? 1 : (mean < 0 ? -1 : 0);
        r.statistic = r.direction > 0 ? INFINITY : (r.direction < 0 ? -INFINITY : 0.0);
        r.p_value = r.direction > 0 ? 0.0 : (r.direction < 0 ? 1.0 : 0.5);
        return r;
    }
    r.statistic = mean / (sd / std::sqrt(static_cast<double>(n)));
    r.direction = mean > 0 ? 1 : -1;
    const boost::math::students_t dist(static_cast<double>(n - 1));
    r.p_value = boost::math::cdf(boost::math::complement(dist, r.statistic));
    return r;
}

double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw DataError("LengthMismatch", "scores and labels differ in length");
    const double positives = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    if (positives == 0 || positives == static_cast<double>(labels.size()))
        throw DataError("SingleClass", "AUPRC needs both positive and negative labels");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return scores[i] > scores[j]; });
    double tp = 0, fp = 0, recall_prev = 0, ap = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? tp : fp) += 1;
            ++j;
        }
        const double recall = tp / positives;
        ap += (recall - recall_prev) * tp / (tp + fp);
        recall_prev = recall;
        i = j;
    }
    return ap;
}

std::string significance_stars(double p) {
    if (p <= 1e-4) return "****";
    if (p <= 1e-3) return "***";
    if (p <= 1e-2) return "**";
    if (p <= 0.05) return "*";
    return "ns";
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> as_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

nlohmann::json test_json(const TestResult& t) {
    return {{"statistic", t.statistic}, {"p_value", t.p_value}, {"stars", significance_stars(t.p_value)},
            {"degenerate", t.degenerate}};
}

}  // namespace

DiversityReport diversity_report(const CountMatrix& original,
                                 const std::vector<std::pair<std::string, CountMatrix>>& synthetic, int pcoa_dims,
                                 double pseudocount) {
    if (synthetic.empty()) throw ConfigError("NoStrategies", "diversity report needs at least one synthetic set");
    DiversityReport r;
    const Eigen::MatrixXd orig = original.cast<double>();
    const Eigen::MatrixXd orig_p = safe_proportions(orig);
    r.original_rows = original.rows();
    r.original_shannon = shannon_rows(orig_p);
    r.original_simpson = simpson_rows(orig_p);
    for (const auto& [name, counts] : synthetic) {
        if (counts.cols() != original.cols())
            throw DataError("ShapeMismatch", "synthetic set '" + name + "' has a different taxon count");
        StrategyDiversity s;
        s.name = name;
        s.synthetic_rows = counts.rows();
        const Eigen::MatrixXd syn = counts.cast<double>();
        const Eigen::MatrixXd syn_p = safe_proportions(syn);
        s.shannon = shannon_rows(syn_p);
        s.simpson = simpson_rows(syn_p);
        s.shannon_test = mann_whitney_u(as_vector(r.original_shannon), as_vector(s.shannon));
        s.simpson_test = mann_whitney_u(as_vector(r.original_simpson), as_vector(s.simpson));
        s.shannon_ks = ks_divergence(as_vector(r.original_shannon), as_vector(s.shannon));
        s.simpson_ks = ks_divergence(as_vector(r.original_simpson), as_vector(s.simpson));
        Eigen::MatrixXd both(orig.rows() + syn.rows(), orig.cols());
        both << orig, syn;
        Eigen::MatrixXd both_p(both.rows(), both.cols());
        both_p << orig_p, syn_p;
        const int k = static_cast<int>(std::min<Eigen::Index>(pcoa_dims, both.rows() - 1));
        s.aitchison = pcoa(aitchison_matrix(both, pseudocount), k);
        s.bray_curtis = pcoa(bray_curtis_matrix(both_p), k);
        r.strategies.push_back(std::move(s));
    }
    return r;
}

nlohmann::json DiversityReport::to_json() const {
    nlohmann::json strategies_json = nlohmann::json::array();
    for (const auto& s : strategies) {
        auto eig = [](const PcoaResult& p, int k) {
            std::vector<double> out;
            for (int a = 0; a < std::min<Eigen::Index>(k, p.eigenvalues.size()); ++a) out.push_back(p.eigenvalues(a));
            return out;
        };
        const int k = static_cast<int>(s.aitchison.coordinates.cols());
        const double ait_total = s.aitchison.eigenvalues.cwiseMax(0.0).sum();
        const double bc_total = s.bray_curtis.eigenvalues.cwiseMax(0.0).sum();
        strategies_json.push_back({
            {"strategy", s.name},
            {"synthetic_samples", s.synthetic_rows},
            {"shannon", {{"mann_whitney", test_json(s.shannon_test)}, {"ks", s.shannon_ks},
                         {"synthetic_mean", s.shannon.size() ? s.shannon.mean() : 0.0}}},
            {"simpson", {{"mann_whitney", test_json(s.simpson_test)}, {"ks", s.simpson_ks},
                         {"synthetic_mean", s.simpson.size() ? s.simpson.mean() : 0.0}}},
            {"pcoa",
             {{"aitchison", {{"eigenvalues", eig(s.aitchison, k)}, {"total_positive", ait_total},
                             {"rank_deficient", s.aitchison.rank_deficient}}},
              {"bray_curtis", {{"eigenvalues", eig(s.bray_curtis, k)}, {"total_positive", bc_total},
                               {"rank_deficient", s.bray_curtis.rank_deficient}}}}},
        });
    }
    return {{"level", "leaf"},
            {"shannon_log_base", "e"},
            {"simpson_form", "gini-simpson: 1 - sum p^2"},
            {"mann_whitney", "two-sided, normal approximation, tie and continuity corrected"},
            {"original_samples", original_rows},
            {"original_shannon_mean", original_shannon.size() ? original_shannon.mean() : 0.0},
            {"original_simpson_mean", original_simpson.size() ? original_simpson.mean() : 0.0},
            {"strategies", strategies_json}};
}

void write_diversity_report(const DiversityReport& report, const std::string& directory) {
    std::filesystem::create_directories(directory);
    const std::filesystem::path dir(directory);
    {
        std::ofstream out(dir / "diversity.json");
        out << report.to_json().dump(2) << "\n";
    }
    {
        std::ofstream out(dir / "pcoa.csv");
        out << std::setprecision(17);
        out << "strategy,metric,source,index";
        const Eigen::Index k = report.strategies.empty() ? 0 : report.strategies[0].aitchison.coordinates.cols();
        for (Eigen::Index a = 0; a < k; ++a) out << ",axis" << a + 1;
        out << "\n";
        for (const auto& s : report.strategies) {
            for (const auto& [metric, res] : {std::pair<const char*, const PcoaResult*>{"aitchison", &s.aitchison},
                                              std::pair<const char*, const PcoaResult*>{"bray_curtis", &s.bray_curtis}}) {
                for (Eigen::Index i = 0; i < res->coordinates.rows(); ++i) {
                    const bool orig = i < report.original_rows;
                    out << s.name << ',' << metric << ',' << (orig ? "original" : "synthetic") << ','
                        << (orig ? i : i - report.original_rows);
                    for (Eigen::Index a = 0; a < res->coordinates.cols(); ++a) out << ',' << res->coordinates(i, a);
                    out << "\n";
                }
            }
        }
    }
    {
        std::ofstream out(dir / "alpha_diversity.csv");
        out << std::setprecision(17);
        out << "source,index,shannon,simpson\n";
        for (Eigen::Index i = 0; i < report.original_shannon.size(); ++i)
            out << "original," << i << ',' << report.original_shannon(i) << ',' << report.original_simpson(i) << "\n";
        for (const auto& s : report.strategies)
            for (Eigen::Index i = 0; i < s.shannon.size(); ++i)
                out << s.name << ',' << i << ',' << s.shannon(i) << ',' << s.simpson(i) << "\n";
    }
}

}  // namespace taxapln
