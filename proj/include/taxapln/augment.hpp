#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "taxapln/model.hpp"
#include "taxapln/random.hpp"
#include "taxapln/taxonomy.hpp"

namespace taxapln {

/// Generated samples with the hierarchy at every level.
struct SyntheticSamples {
    std::vector<CountMatrix> levels;
    Matrix covariates;                  ///< inherited from the anchors (empty if none)
    std::vector<Eigen::Index> anchors;  ///< training row behind each draw

    const CountMatrix& leaves() const { return levels.back(); }
};

/// Uniform anchor from the training set, one posterior draw, emission decode.
SyntheticSamples vamp_sample(const Model& model, const ModelData& train, Eigen::Index m, Rng& rng);

/// Ancestral draws from the fitted prior. Conditional models need m covariate rows.
SyntheticSamples prior_sample(const Model& model, Eigen::Index m, Rng& rng, const Matrix& covariates = Matrix());

// ---------------------------------------------------------------------------
// Mixup family on proportions

struct Mixed {
    Eigen::VectorXd x;
    double weight_i = 1.0;  ///< soft label: weight of donor i, donor j gets the rest
};

Eigen::VectorXd vanilla_mixup(const Eigen::VectorXd& xi, const Eigen::VectorXd& xj, double lambda);

/// Copies taxa from i where `from_i` is set and from j elsewhere, then renormalises.
/// Throws DataError("DegenerateMix") when the selection carries no mass.
Mixed cutmix_partition(const Eigen::VectorXd& xi, const Eigen::VectorXd& xj, const std::vector<bool>& from_i);

/// Per-taxon donor choice with one lambda ~ U(0,1) per pair; retries degenerate partitions.
Mixed compositional_cutmix(const Eigen::VectorXd& xi, const Eigen::VectorXd& xj, Rng& rng);

/// Random disjoint subtrees (level, node) covering round((1 - lambda) K) leaves.
/// Nodes at every level are candidates, leaves included.
std::vector<std::pair<int, int>> phylomix_nodes(const TaxonomyTree& tree, double lambda, Rng& rng);

/// Covered leaves from j, the rest from i, renormalised. Soft label (lambda, 1 - lambda).
Mixed phylomix(const Eigen::VectorXd& xi, const Eigen::VectorXd& xj, const TaxonomyTree& tree, double lambda, Rng& rng);

// ---------------------------------------------------------------------------
// Dataset-level augmentation

/// Strategies known to augment_dataset.
///   none          no synthetic rows
///   copy          uniformly drawn duplicates of real rows
///   taxapln       VAMP on a per-label PLN-Tree
///   taxapln-prior prior draws from a per-label PLN-Tree
///   taxapln-c     VAMP on a per-label covariate-conditioned PLN-Tree
///   pln           VAMP on a per-label flat PLN
///   mixup, cutmix, phylomix
const std::vector<std::string>& known_strategies();
bool is_model_strategy(const std::string& strategy);

struct LabeledData {
    CountMatrix counts;  ///< n x K_L leaves
    std::vector<int> labels;
    Matrix covariates;   ///< n x C or empty
    int label_count = 2;

    Eigen::Index rows() const { return counts.rows(); }
};

struct Provenance {
    std::string source = "real";       ///< "real" or the strategy name
    std::vector<Eigen::Index> donors;  ///< rows of the input the sample came from
};

struct AugmentOptions {
    std::int64_t total_count = 100000;  ///< depth of mixup conversions back to counts
    double mix_alpha = 2.0, mix_beta = 2.0;
    /// Pair mixup donors across labels (soft labels) instead of within a label.
    bool cross_label = false;
};

struct AugmentedDataset {
    CountMatrix counts;
    std::vector<int> labels;        ///< hard labels (argmax of the soft label)
    Eigen::MatrixXd soft_labels;    ///< rows x label_count
    Matrix covariates;
    std::vector<Provenance> provenance;
    double beta = 1.0;
    std::string strategy;
    Eigen::Index original_rows = 0;

    Eigen::Index synthetic_rows() const { return counts.rows() - original_rows; }
};

/// Number of synthetic rows per label: round((beta - 1) n) split by label
/// frequency with largest-remainder rounding.
std::vector<Eigen::Index> synthetic_label_counts(const std::vector<int>& labels, int label_count, double beta);

/// Appends round((beta - 1) n) synthetic rows to `data`. Model strategies read
/// `label_models[c]` for every label c that needs rows.
AugmentedDataset augment_dataset(const LabeledData& data, const TaxonomyTree& tree, const std::string& strategy,
                                 double beta, std::uint64_t seed, const std::vector<const Model*>& label_models = {},
                                 const AugmentOptions& options = {});

/// Provenance as CSV rows: row,source,label,donors (donors ';'-joined).
void write_provenance_csv(std::ostream& out, const AugmentedDataset& data);

}  // namespace taxapln
