#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "taxapln/error.hpp"
#include "taxapln/random.hpp"
#include "taxapln/taxonomy.hpp"

namespace taxapln {

enum class AbundanceKind { relative, counts };

/// n samples (rows) by p taxa (columns).
struct AbundanceTable {
    std::vector<std::string> sample_ids;
    std::vector<std::string> taxa_lineages;
    Eigen::MatrixXd values;
    AbundanceKind kind = AbundanceKind::relative;
};

struct TableReadOptions {
    AbundanceKind kind = AbundanceKind::relative;
    /// false: first column holds lineages and every other column is a sample.
    /// true: first column holds sample ids and the header row holds lineages.
    bool samples_in_rows = false;
    /// 0 picks ';' ',' or '\t' from the header line.
    char delimiter = 0;
};

AbundanceTable load_abundance_table(std::istream& in, const TableReadOptions& options = {});

/// Writes the table back with taxa in rows, integer cells for count tables.
void write_abundance_table(std::ostream& out, const AbundanceTable& table, char delimiter = '\t');

/// Keeps taxon j iff it is nonzero in at least threshold * n samples.
AbundanceTable prevalence_filter(const AbundanceTable& table, double threshold);

/// One multinomial draw of `total` reads per sample.
AbundanceTable to_counts(const AbundanceTable& table, std::int64_t total, Rng& rng);

CountMatrix as_count_matrix(const AbundanceTable& table);

/// Centered log-ratio of each row after adding `pseudocount`.
template <typename Derived>
Eigen::MatrixXd clr_transform(const Eigen::MatrixBase<Derived>& counts, double pseudocount = 1.0) {
    const Eigen::MatrixXd shifted = counts.template cast<double>().array() + pseudocount;
    if ((shifted.array() <= 0.0).any())
        throw DataError("NonPositiveEntry", "CLR needs strictly positive entries; use a positive pseudocount");
    Eigen::MatrixXd logs = shifted.array().log().matrix();
    const Eigen::VectorXd centre = logs.rowwise().mean();
    logs.colwise() -= centre;
    return logs;
}

/// Divides each row by its sum.
template <typename Derived>
Eigen::MatrixXd to_proportions(const Eigen::MatrixBase<Derived>& counts) {
    Eigen::MatrixXd out = counts.template cast<double>();
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const double s = out.row(i).sum();
        if (!(s > 0.0)) throw DataError("ZeroRow", "row " + std::to_string(i) + " sums to zero");
        out.row(i) /= s;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metadata and covariates

/// Raw CSV metadata: string cells keyed by column name.
struct MetadataTable {
    std::vector<std::string> sample_ids;
    std::map<std::string, std::vector<std::string>> columns;

    const std::string& cell(const std::string& column, std::size_t row) const;
    bool has_column(const std::string& column) const { return columns.count(column) > 0; }
    /// Sub-table restricted to the given rows, in that order.
    MetadataTable select(const std::vector<std::size_t>& rows) const;
};

MetadataTable load_metadata(std::istream& in);

enum class CovariateEncoding { ordinal, binary, minmax, onehot };

struct CovariateField {
    std::string name;
    CovariateEncoding encoding = CovariateEncoding::minmax;
    /// ordinal: rank order; binary: {zero-category, one-category}.
    std::vector<std::string> categories;
};

/// Schema used for the curated cohorts: age (ordinal), sex (binary),
/// bmi (min-max), country (one-hot).
std::vector<CovariateField> default_covariate_schema();

struct CovariateMatrix {
    std::vector<std::string> sample_ids;
    std::vector<std::string> column_names;
    Eigen::MatrixXd values;
    /// Row saw a one-hot category absent from the fitting rows (group left at zero).
    std::vector<bool> unknown_category;
};

/// Fits min/max statistics and one-hot vocabularies on a set of rows, then
/// encodes any rows with those frozen statistics.
class CovariateEncoder {
public:
    CovariateEncoder() = default;
    CovariateEncoder(std::vector<CovariateField> schema, const MetadataTable& fit_rows);

    CovariateMatrix transform(const MetadataTable& rows) const;
    int width() const;
    const std::vector<CovariateField>& schema() const { return schema_; }

private:
    std::vector<CovariateField> schema_;
    std::vector<double> min_, max_;
    std::vector<std::vector<std::string>> vocab_;
};

// ---------------------------------------------------------------------------
// Cohort assembly

/// Counts, tree, labels and raw metadata joined on sample id.
struct Cohort {
    std::vector<std::string> sample_ids;
    TaxonomyTree tree;
    CountMatrix counts;  ///< n x K_L leaf counts, leaf order of `tree`
    std::vector<int> labels;
    std::vector<std::string> label_names;
    std::optional<MetadataTable> metadata;  ///< rows aligned with sample_ids

    Eigen::Index size() const { return counts.rows(); }
    int label_count() const { return static_cast<int>(label_names.size()); }
};

struct CohortOptions {
    TableReadOptions table;
    std::optional<std::pair<int, int>> rank_range;
    double prevalence = 0.15;
    std::int64_t total_count = 100000;
    std::string label_column = "label";
};

/// Loads abundances (+ metadata), filters by prevalence, converts relative
/// tables to counts and builds the taxonomy from the retained lineages.
Cohort prepare_cohort(std::istream& abundance, std::istream* metadata, const CohortOptions& options, Rng& rng);

/// Maps label strings to 0..M-1 in sorted order (numeric order when every
/// label parses as a number).
std::pair<std::vector<int>, std::vector<std::string>> encode_labels(const std::vector<std::string>& raw);

}  // namespace taxapln
