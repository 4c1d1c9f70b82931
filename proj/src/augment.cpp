#include "taxapln/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "taxapln/error.hpp"

namespace taxapln {

namespace {

Eigen::VectorXd row_proportions(const CountMatrix& counts, Eigen::Index i) {
    Eigen::VectorXd p = counts.row(i).cast<double>().transpose();
    const double s = p.sum();
    if (s > 0) p /= s;
    return p;
}

}  // namespace

SyntheticSamples vamp_sample(const Model& model, const ModelData& train, Eigen::Index m, Rng& rng) {
    if (train.rows() == 0) throw DataError("EmptyTrainingSet", "VAMP sampling needs at least one training sample");
    if (m < 1) throw ConfigError("InvalidCount", "sample count must be positive");
    std::uniform_int_distribution<Eigen::Index> pick(0, train.rows() - 1);
    SyntheticSamples out;
    out.anchors.resize(static_cast<std::size_t>(m));
    for (auto& a : out.anchors) a = pick(rng);
    const ModelData anchors = train.select(out.anchors);
    out.levels = model.sample_posterior(anchors, rng);
    out.covariates = anchors.covariates;
    return out;
}

SyntheticSamples prior_sample(const Model& model, Eigen::Index m, Rng& rng, const Matrix& covariates) {
    if (m < 1) throw ConfigError("InvalidCount", "sample count must be positive");
    SyntheticSamples out;
    out.levels = model.sample_prior(m, covariates, rng);
    out.covariates = covariates;
    return out;
}

// ---------------------------------------------------------------------------

Eigen::VectorXd vanilla_mixup(const Eigen::VectorXd& xi, const Eigen::VectorXd& xj, double lambda) {
    if (xi.size() != xj.size()) throw DataError("LengthMismatch", "mixup donors differ in length");
    if (lambda == 1.0) return xi;
    if (lambda == 0.0) return xj;
    return lambda * xi + (1.0 - lambda) * xj;
}

Mixed cutmix_partition(const Eigen::VectorXd& xi, const Eigen::VectorXd& xj, const std::vector<bool>& from_i) {
    if (xi.size() != xj.size() || static_cast<Eigen::Index>(from_i.size()) != xi.size())
        throw DataError("LengthMismatch", "cutmix donors and partition differ in length");
    Mixed out;
    out.x.resize(xi.size());
    double mass_i = 0, mass_j = 0;
    for (Eigen::Index k = 0; k < xi.size(); ++k) {
        if (from_i[static_cast<std::size_t>(k)]) {
            out.x(k) = xi(k);
            mass_i += xi(k);
        } else {
            out.x(k) = xj(k);
            mass_j += xj(k);
        }
    }
    const double total = mass_i + mass_j;
    if (!(total > 0)) throw DataError("DegenerateMix", "selected coordinates carry no mass");
    out.x /= total;
    out.weight_i = mass_i / total;
    return out;
}

Mixed compositional_cutmix(const Eigen::VectorXd& xi, const Eigen::VectorXd& xj, Rng& rng) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<bool> from_i(static_cast<std::size_t>(xi.size()));
    for (int attempt = 0; attempt < 64; ++attempt) {
        const double lambda = unif(rng);
        for (std::size_t k = 0; k < from_i.size(); ++k) from_i[k] = unif(rng) < lambda;
        try {
            return cutmix_partition(xi, xj, from_i);
        } catch (const DataError& e) {
            if (e.code() != "DegenerateMix") throw;
        }
    }
    throw DataError("DegenerateMix", "no partition with positive mass after 64 attempts");
}

std::vector<std::pair<int, int>> phylomix_nodes(const TaxonomyTree& tree, double lambda, Rng& rng) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("InvalidLambda", "lambda must lie in [0, 1]");
    const int K = tree.leaf_count();
    const int target = static_cast<int>(std::lround((1.0 - lambda) * K));
    // every node is a candidate, leaves included, so the budget is always met exactly
    std::vector<std::pair<int, int>> nodes;
    for (int l = 0; l < tree.depth(); ++l)
        for (int k = 0; k < tree.layer_size(l); ++k) nodes.emplace_back(l, k);
    std::shuffle(nodes.begin(), nodes.end(), rng);
    std::vector<bool> covered(static_cast<std::size_t>(K), false);
    std::vector<std::pair<int, int>> chosen;
    int count = 0;
    for (const auto& [l, k] : nodes) {
        if (count == target) break;
        const auto leaves = tree.leaf_descendants(l, k);
        if (count + static_cast<int>(leaves.size()) > target) continue;
        if (std::any_of(leaves.begin(), leaves.end(), [&](int j) { return covered[static_cast<std::size_t>(j)]; })) continue;
        for (int j : leaves) covered[static_cast<std::size_t>(j)] = true;
        count += static_cast<int>(leaves.size());
        chosen.emplace_back(l, k);
    }
    return chosen;
}

Mixed phylomix(const Eigen::VectorXd& xi, const Eigen::VectorXd& xj, const TaxonomyTree& tree, double lambda, Rng& rng) {
    if (xi.size() != xj.size() || xi.size() != tree.leaf_count())
        throw DataError("LengthMismatch", "phylomix donors must match the leaves");
    Mixed out;
    out.weight_i = lambda;
    out.x = xi;
    for (const auto& [l, k] : phylomix_nodes(tree, lambda, rng))
        for (int j : tree.leaf_descendants(l, k)) out.x(j) = xj(j);
    const double s = out.x.sum();
    if (s > 0) {
        out.x /= s;
    } else {
        // the chosen pieces are empty in both donors; fall back to the plain convex mix
        out.x = vanilla_mixup(xi, xj, lambda);
    }
    return out;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& known_strategies() {
    static const std::vector<std::string> names{"none", "copy", "taxapln", "taxapln-prior", "taxapln-c",
                                                "pln", "mixup", "cutmix", "phylomix"};
    return names;
}

bool is_model_strategy(const std::string& s) {
    return s == "taxapln" || s == "taxapln-prior" || s == "taxapln-c" || s == "pln";
}

std::vector<Eigen::Index> synthetic_label_counts(const std::vector<int>& labels, int label_count, double beta) {
    if (!(beta >= 1.0) || !std::isfinite(beta)) throw ConfigError("InvalidRatio", "augmentation ratio must be >= 1");
    const auto n = static_cast<double>(labels.size());
    std::vector<Eigen::Index> per(static_cast<std::size_t>(label_count), 0);
    if (labels.empty()) return per;
    std::vector<double> freq(static_cast<std::size_t>(label_count), 0.0);
    for (int y : labels) freq.at(static_cast<std::size_t>(y)) += 1;
    const auto total = static_cast<Eigen::Index>(std::llround((beta - 1.0) * n));
    std::vector<double> frac(per.size());
    Eigen::Index assigned = 0;
    for (std::size_t c = 0; c < per.size(); ++c) {
        const double quota = static_cast<double>(total) * freq[c] / n;
        per[c] = static_cast<Eigen::Index>(std::floor(quota));
        frac[c] = quota - static_cast<double>(per[c]);
        assigned += per[c];
    }
    std::vector<std::size_t> order(per.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t r = 0; assigned < total; ++r, ++assigned) ++per[order[r % order.size()]];
    return per;
}

AugmentedDataset augment_dataset(const LabeledData& data, const TaxonomyTree& tree, const std::string& strategy,
                                 double beta, std::uint64_t seed, const std::vector<const Model*>& label_models,
                                 const AugmentOptions& options) {
    if (std::find(known_strategies().begin(), known_strategies().end(), strategy) == known_strategies().end())
        throw ConfigError("UnknownStrategy", "unknown augmentation strategy '" + strategy + "'");
    if (data.counts.cols() != tree.leaf_count()) throw DataError("ShapeMismatch", "counts do not match the tree leaves");
    if (static_cast<Eigen::Index>(data.labels.size()) != data.rows())
        throw DataError("ShapeMismatch", "one label per sample is required");
    const bool has_cov = data.covariates.size() > 0;
    if (has_cov && data.covariates.rows() != data.rows())
        throw DataError("ShapeMismatch", "covariate rows do not match the samples");

    const auto per_label = synthetic_label_counts(data.labels, data.label_count, strategy == "none" ? 1.0 : beta);
    const Eigen::Index n = data.rows();
    const Eigen::Index synth = std::accumulate(per_label.begin(), per_label.end(), Eigen::Index{0});
    const int M = data.label_count;

    AugmentedDataset out;
    out.beta = beta;
    out.strategy = strategy;
    out.original_rows = n;
    out.counts.resize(n + synth, data.counts.cols());
    out.counts.topRows(n) = data.counts;
    out.labels = data.labels;
    out.soft_labels = Eigen::MatrixXd::Zero(n + synth, M);
    for (Eigen::Index i = 0; i < n; ++i) out.soft_labels(i, data.labels[static_cast<std::size_t>(i)]) = 1.0;
    if (has_cov) {
        out.covariates.resize(n + synth, data.covariates.cols());
        out.covariates.topRows(n) = data.covariates;
    }
    out.provenance.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) out.provenance[static_cast<std::size_t>(i)].donors = {i};

    std::vector<std::vector<Eigen::Index>> members(static_cast<std::size_t>(M));
    for (Eigen::Index i = 0; i < n; ++i) members.at(static_cast<std::size_t>(data.labels[static_cast<std::size_t>(i)])).push_back(i);
    std::vector<Eigen::Index> everyone(static_cast<std::size_t>(n));
    std::iota(everyone.begin(), everyone.end(), 0);

    Eigen::Index row = n;
    for (int c = 0; c < M; ++c) {
        const Eigen::Index m = per_label[static_cast<std::size_t>(c)];
        if (m == 0) continue;
        const auto& rows_c = members[static_cast<std::size_t>(c)];
        Rng rng = make_rng(seed, "augment", {static_cast<std::uint64_t>(c)});
        // covariates follow the first donor; a donorless prior draw uses `cov_row`
        auto emit = [&](const CountVector& counts, int label, double weight, int other_label,
                        std::vector<Eigen::Index> donors, Eigen::Index cov_row) {
            out.counts.row(row) = counts.transpose();
            out.soft_labels(row, label) += weight;
            out.soft_labels(row, other_label) += 1.0 - weight;
            out.labels.push_back(weight >= 0.5 ? label : other_label);
            if (has_cov) out.covariates.row(row) = data.covariates.row(donors.empty() ? cov_row : donors.front());
            out.provenance.push_back({strategy, std::move(donors)});
            ++row;
        };

        if (is_model_strategy(strategy)) {
            const Model* model = static_cast<std::size_t>(c) < label_models.size() ? label_models[static_cast<std::size_t>(c)] : nullptr;
            if (!model) throw ConfigError("MissingLabelModel", "no fitted model for label " + std::to_string(c));
            if (!(model->tree() == tree)) throw DataError("TaxonomyMismatch", "model was fitted on another taxonomy");
            const bool wants_cov = strategy == "taxapln-c";
            if (wants_cov && (!model->conditional() || !has_cov))
                throw ConfigError("MissingCovariates", "conditional strategy needs a conditional model and covariates");
            const CountMatrix counts_c = data.counts(rows_c, Eigen::all);
            const Matrix cov_c = has_cov ? Matrix(data.covariates(rows_c, Eigen::all)) : Matrix();
            const ModelData train = make_model_data(tree, counts_c, model->conditional() ? cov_c : Matrix());
            SyntheticSamples s;
            if (strategy == "taxapln-prior") {
                // covariates for a conditional prior come from anchors as in VAMP
                Matrix cov;
                std::vector<Eigen::Index> anchors;
                if (model->conditional()) {
                    std::uniform_int_distribution<Eigen::Index> pick(0, train.rows() - 1);
                    for (Eigen::Index k = 0; k < m; ++k) anchors.push_back(pick(rng));
                    cov = train.covariates(anchors, Eigen::all);
                }
                s = prior_sample(*model, m, rng, cov);
                s.anchors = anchors;
            } else {
                s = vamp_sample(*model, train, m, rng);
            }
            for (Eigen::Index k = 0; k < m; ++k) {
                std::vector<Eigen::Index> donors;
                if (!s.anchors.empty()) donors.push_back(rows_c[static_cast<std::size_t>(s.anchors[static_cast<std::size_t>(k)])]);
                emit(s.leaves().row(k).transpose(), c, 1.0, c, donors, rows_c[static_cast<std::size_t>(k) % rows_c.size()]);
            }
            continue;
        }

        const auto& pool_j = options.cross_label ? everyone : rows_c;
        std::uniform_int_distribution<std::size_t> pick_i(0, rows_c.size() - 1), pick_j(0, pool_j.size() - 1);
        for (Eigen::Index k = 0; k < m; ++k) {
            const Eigen::Index i = rows_c[pick_i(rng)];
            if (strategy == "copy") {
                emit(data.counts.row(i).transpose(), c, 1.0, c, {i}, i);
                continue;
            }
            const Eigen::Index j = pool_j[pick_j(rng)];
            const Eigen::VectorXd xi = row_proportions(data.counts, i), xj = row_proportions(data.counts, j);
            Mixed mixed;
            if (strategy == "mixup") {
                const double lambda = beta_draw(options.mix_alpha, options.mix_beta, rng);
                mixed = {vanilla_mixup(xi, xj, lambda), lambda};
            } else if (strategy == "cutmix") {
                if (xi.sum() == 0 && xj.sum() == 0) mixed = {xi, 1.0};
                else mixed = compositional_cutmix(xi, xj, rng);
            } else {
                const double lambda = beta_draw(options.mix_alpha, options.mix_beta, rng);
                mixed = phylomix(xi, xj, tree, lambda, rng);
            }
            const CountVector counts =
                mixed.x.sum() > 0 ? multinomial(options.total_count, mixed.x, rng) : CountVector::Zero(mixed.x.size());
            emit(counts, c, mixed.weight_i, data.labels[static_cast<std::size_t>(j)], {i, j}, i);
        }
    }
    return out;
}

void write_provenance_csv(std::ostream& out, const AugmentedDataset& data) {
    out << "row,source,label,donors\n";
    for (std::size_t r = static_cast<std::size_t>(data.original_rows); r < data.provenance.size(); ++r) {
        out << r << ',' << data.provenance[r].source << ',' << data.labels[r] << ',';
        for (std::size_t d = 0; d < data.provenance[r].donors.size(); ++d)
            out << (d ? ";" : "") << data.provenance[r].donors[d];
        out << "\n";
    }
}

}  // namespace taxapln
