#include "taxapln/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_map>

namespace taxapln {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string cell;
    bool quoted = false;
    for (char c : line) {
        if (c == '"') {
            quoted = !quoted;
        } else if (c == delim && !quoted) {
            out.push_back(trim(cell));
            cell.clear();
        } else {
            cell += c;
        }
    }
    out.push_back(trim(cell));
    return out;
}

char detect_delimiter(const std::string& header) {
    if (header.find('\t') != std::string::npos) return '\t';
    if (header.find(',') != std::string::npos) return ',';
    if (header.find(';') != std::string::npos) return ';';
    return '\t';
}

bool getline_nonempty(std::istream& in, std::string& line) {
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!trim(line).empty()) return true;
    }
    return false;
}

double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
    double v = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last || !std::isfinite(v))
        throw DataError("NonNumericCell", "cell (" + std::to_string(row) + ", " + std::to_string(col) + ") = '" +
                                              cell + "' is not a finite number");
    if (v < 0.0)
        throw DataError("NegativeValue", "cell (" + std::to_string(row) + ", " + std::to_string(col) + ") is negative");
    return v;
}

void check_relative_rows(AbundanceTable& table) {
    for (Eigen::Index i = 0; i < table.values.rows(); ++i) {
        const double s = table.values.row(i).sum();
        if (std::abs(s - 1.0) >= 1e-3)
            throw DataError("RowSumViolation", "sample '" + table.sample_ids[i] + "' sums to " + std::to_string(s));
        table.values.row(i) /= s;
    }
}

}  // namespace

AbundanceTable load_abundance_table(std::istream& in, const TableReadOptions& options) {
    std::string line;
    if (!getline_nonempty(in, line)) throw DataError("EmptyInput", "abundance table is empty");
    const char delim = options.delimiter ? options.delimiter : detect_delimiter(line);
    const auto header = split(line, delim);
    if (header.size() < 2) throw DataError("ShapeMismatch", "abundance table needs at least two columns");

    std::vector<std::string> row_keys;
    std::vector<std::vector<double>> rows;
    while (getline_nonempty(in, line)) {
        auto cells = split(line, delim);
        if (cells.size() != header.size())
            throw DataError("ShapeMismatch", "row " + std::to_string(rows.size() + 1) + " has " +
                                                 std::to_string(cells.size()) + " cells, header has " +
                                                 std::to_string(header.size()));
        std::vector<double> values;
        for (std::size_t c = 1; c < cells.size(); ++c) values.push_back(parse_cell(cells[c], rows.size() + 1, c));
        row_keys.push_back(cells[0]);
        rows.push_back(std::move(values));
    }
    if (rows.empty()) throw DataError("EmptyInput", "abundance table has no data rows");

    const Eigen::Index r = static_cast<Eigen::Index>(rows.size());
    const Eigen::Index c = static_cast<Eigen::Index>(header.size() - 1);
    Eigen::MatrixXd raw(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) raw(i, j) = rows[i][j];

    AbundanceTable table;
    table.kind = options.kind;
    std::vector<std::string> column_keys(header.begin() + 1, header.end());
    if (options.samples_in_rows) {
        table.sample_ids = std::move(row_keys);
        table.taxa_lineages = std::move(column_keys);
        table.values = std::move(raw);
    } else {
        table.sample_ids = std::move(column_keys);
        table.taxa_lineages = std::move(row_keys);
        table.values = raw.transpose();
    }
    if (table.kind == AbundanceKind::relative) check_relative_rows(table);
    return table;
}

void write_abundance_table(std::ostream& out, const AbundanceTable& table, char delimiter) {
    out << "lineage";
    for (const auto& id : table.sample_ids) out << delimiter << id;
    out << '\n';
    std::ostringstream cell;
    cell.precision(17);
    for (Eigen::Index j = 0; j < table.values.cols(); ++j) {
        out << table.taxa_lineages[j];
        for (Eigen::Index i = 0; i < table.values.rows(); ++i) {
            out << delimiter;
            if (table.kind == AbundanceKind::counts)
                out << static_cast<std::int64_t>(std::llround(table.values(i, j)));
            else {
                cell.str("");
                cell << table.values(i, j);
                out << cell.str();
            }
        }
        out << '\n';
    }
}

AbundanceTable prevalence_filter(const AbundanceTable& table, double threshold) {
    if (!(threshold >= 0.0 && threshold <= 1.0))
        throw ConfigError("InvalidThreshold", "prevalence threshold must lie in [0, 1]");
    const double n = static_cast<double>(table.values.rows());
    // Tolerance keeps 15 of 100 at threshold 0.15 despite 0.15 * 100 > 15 in binary.
    const double needed = threshold * n - 1e-9 * std::max(1.0, n);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index j = 0; j < table.values.cols(); ++j) {
        const double present = static_cast<double>((table.values.col(j).array() > 0.0).count());
        if (present >= needed) keep.push_back(j);
    }
    if (keep.empty()) throw DataError("AllTaxaRemoved", "prevalence filter removed every taxon");

    AbundanceTable out;
    out.kind = table.kind;
    out.sample_ids = table.sample_ids;
    out.values.resize(table.values.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        out.values.col(static_cast<Eigen::Index>(k)) = table.values.col(keep[k]);
        out.taxa_lineages.push_back(table.taxa_lineages[keep[k]]);
    }
    if (out.kind == AbundanceKind::relative) {
        for (Eigen::Index i = 0; i < out.values.rows(); ++i) {
            const double s = out.values.row(i).sum();
            if (!(s > 0.0))
                throw DataError("ZeroRow", "sample '" + out.sample_ids[i] + "' has no retained taxa");
            out.values.row(i) /= s;
        }
    }
    return out;
}

AbundanceTable to_counts(const AbundanceTable& table, std::int64_t total, Rng& rng) {
    if (table.kind != AbundanceKind::relative) throw ConfigError("WrongKind", "to_counts expects a relative table");
    if (total < 1) throw ConfigError("InvalidTotal", "count total must be >= 1");
    AbundanceTable out = table;
    out.kind = AbundanceKind::counts;
    for (Eigen::Index i = 0; i < table.values.rows(); ++i) {
        const Eigen::VectorXd p = table.values.row(i).transpose();
        out.values.row(i) = multinomial(total, p, rng).cast<double>().transpose();
    }
    return out;
}

CountMatrix as_count_matrix(const AbundanceTable& table) {
    if (table.kind != AbundanceKind::counts) throw ConfigError("WrongKind", "table does not hold counts");
    CountMatrix out(table.values.rows(), table.values.cols());
    for (Eigen::Index i = 0; i < out.rows(); ++i)
        for (Eigen::Index j = 0; j < out.cols(); ++j) {
            const double v = table.values(i, j);
            if (v != std::floor(v)) throw DataError("NonIntegerCount", "count table holds a fractional value");
            out(i, j) = static_cast<std::int64_t>(v);
        }
    return out;
}

// ---------------------------------------------------------------------------

const std::string& MetadataTable::cell(const std::string& column, std::size_t row) const {
    auto it = columns.find(column);
    if (it == columns.end()) throw DataError("MissingColumn", "metadata has no column '" + column + "'");
    return it->second.at(row);
}

MetadataTable MetadataTable::select(const std::vector<std::size_t>& rows) const {
    MetadataTable out;
    for (auto r : rows) out.sample_ids.push_back(sample_ids.at(r));
    for (const auto& [name, values] : columns) {
        auto& dst = out.columns[name];
        for (auto r : rows) dst.push_back(values.at(r));
    }
    return out;
}

MetadataTable load_metadata(std::istream& in) {
    std::string line;
    if (!getline_nonempty(in, line)) throw DataError("EmptyInput", "metadata is empty");
    const char delim = detect_delimiter(line);
    const auto header = split(line, delim);
    if (header.empty() || header[0] != "sample_id")
        throw DataError("MissingColumn", "metadata header must start with 'sample_id'");
    MetadataTable table;
    for (std::size_t c = 1; c < header.size(); ++c) table.columns[header[c]];
    while (getline_nonempty(in, line)) {
        auto cells = split(line, delim);
        if (cells.size() != header.size())
            throw DataError("ShapeMismatch", "metadata row " + std::to_string(table.sample_ids.size() + 1) +
                                                 " has the wrong number of cells");
        table.sample_ids.push_back(cells[0]);
        for (std::size_t c = 1; c < header.size(); ++c) table.columns[header[c]].push_back(cells[c]);
    }
    return table;
}

std::vector<CovariateField> default_covariate_schema() {
    return {
        {"age", CovariateEncoding::ordinal, {"newborn", "child", "schoolage", "adult", "senior"}},
        {"sex", CovariateEncoding::binary, {"F", "M"}},
        {"bmi", CovariateEncoding::minmax, {}},
        {"country", CovariateEncoding::onehot, {}},
    };
}

namespace {

bool is_missing(const std::string& v) { return v.empty() || v == "NA" || v == "NaN" || v == "nan"; }

const std::string& present_cell(const MetadataTable& t, const std::string& column, std::size_t row) {
    const auto& v = t.cell(column, row);
    if (is_missing(v))
        throw DataError("MissingValue", "sample '" + t.sample_ids[row] + "' has no value for '" + column + "'");
    return v;
}

double parse_real(const std::string& v, const std::string& column) {
    double x = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(x))
        throw DataError("NonNumericCell", "covariate '" + column + "' value '" + v + "' is not numeric");
    return x;
}

}  // namespace

CovariateEncoder::CovariateEncoder(std::vector<CovariateField> schema, const MetadataTable& fit_rows)
    : schema_(std::move(schema)) {
    if (fit_rows.sample_ids.empty()) throw DataError("EmptyInput", "covariate encoder needs at least one row");
    min_.assign(schema_.size(), 0.0);
    max_.assign(schema_.size(), 0.0);
    vocab_.resize(schema_.size());
    for (std::size_t f = 0; f < schema_.size(); ++f) {
        const auto& field = schema_[f];
        switch (field.encoding) {
            case CovariateEncoding::minmax: {
                double lo = std::numeric_limits<double>::infinity(), hi = -lo;
                for (std::size_t i = 0; i < fit_rows.sample_ids.size(); ++i) {
                    const double x = parse_real(present_cell(fit_rows, field.name, i), field.name);
                    lo = std::min(lo, x);
                    hi = std::max(hi, x);
                }
                min_[f] = lo;
                max_[f] = hi;
                break;
            }
            case CovariateEncoding::onehot: {
                std::set<std::string> seen;
                for (std::size_t i = 0; i < fit_rows.sample_ids.size(); ++i)
                    seen.insert(present_cell(fit_rows, field.name, i));
                vocab_[f].assign(seen.begin(), seen.end());
                break;
            }
            case CovariateEncoding::binary:
                if (field.categories.size() != 2)
                    throw ConfigError("InvalidSchema", "binary field '" + field.name + "' needs two categories");
                break;
            case CovariateEncoding::ordinal:
                if (field.categories.empty())
                    throw ConfigError("InvalidSchema", "ordinal field '" + field.name + "' needs a category order");
                break;
        }
        if (!fit_rows.has_column(field.name))
            throw DataError("MissingColumn", "metadata has no column '" + field.name + "'");
    }
}

int CovariateEncoder::width() const {
    int w = 0;
    for (std::size_t f = 0; f < schema_.size(); ++f)
        w += schema_[f].encoding == CovariateEncoding::onehot ? static_cast<int>(vocab_[f].size()) : 1;
    return w;
}

CovariateMatrix CovariateEncoder::transform(const MetadataTable& rows) const {
    CovariateMatrix out;
    out.sample_ids = rows.sample_ids;
    const Eigen::Index n = static_cast<Eigen::Index>(rows.sample_ids.size());
    out.values = Eigen::MatrixXd::Zero(n, width());
    out.unknown_category.assign(rows.sample_ids.size(), false);

    Eigen::Index col = 0;
    for (std::size_t f = 0; f < schema_.size(); ++f) {
        const auto& field = schema_[f];
        switch (field.encoding) {
            case CovariateEncoding::minmax: {
                out.column_names.push_back(field.name);
                const double span = max_[f] - min_[f];
                for (Eigen::Index i = 0; i < n; ++i) {
                    const double x = parse_real(present_cell(rows, field.name, i), field.name);
                    // Out-of-range test values are clipped to the training range.
                    out.values(i, col) = span > 0.0 ? std::clamp((x - min_[f]) / span, 0.0, 1.0) : 0.0;
                }
                ++col;
                break;
            }
            case CovariateEncoding::binary:
            case CovariateEncoding::ordinal: {
                out.column_names.push_back(field.name);
                for (Eigen::Index i = 0; i < n; ++i) {
                    const auto& v = present_cell(rows, field.name, i);
                    auto it = std::find(field.categories.begin(), field.categories.end(), v);
                    if (it == field.categories.end())
                        throw DataError("UnknownCategory", "value '" + v + "' of '" + field.name + "' is not in the schema");
                    out.values(i, col) = static_cast<double>(it - field.categories.begin());
                }
                ++col;
                break;
            }
            case CovariateEncoding::onehot: {
                for (const auto& cat : vocab_[f]) out.column_names.push_back(field.name + "=" + cat);
                for (Eigen::Index i = 0; i < n; ++i) {
                    const auto& v = present_cell(rows, field.name, i);
                    auto it = std::find(vocab_[f].begin(), vocab_[f].end(), v);
                    if (it == vocab_[f].end())
                        out.unknown_category[i] = true;
                    else
                        out.values(i, col + (it - vocab_[f].begin())) = 1.0;
                }
                col += static_cast<Eigen::Index>(vocab_[f].size());
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

std::pair<std::vector<int>, std::vector<std::string>> encode_labels(const std::vector<std::string>& raw) {
    std::vector<std::string> names(raw.begin(), raw.end());
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    const bool numeric = std::all_of(names.begin(), names.end(), [](const std::string& s) {
        double x;
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
        return ec == std::errc() && ptr == s.data() + s.size();
    });
    if (numeric)
        std::sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) {
            return std::stod(a) < std::stod(b);
        });
    std::unordered_map<std::string, int> index;
    for (std::size_t i = 0; i < names.size(); ++i) index[names[i]] = static_cast<int>(i);
    std::vector<int> labels;
    labels.reserve(raw.size());
    for (const auto& s : raw) labels.push_back(index.at(s));
    return {labels, names};
}

Cohort prepare_cohort(std::istream& abundance, std::istream* metadata, const CohortOptions& options, Rng& rng) {
    AbundanceTable table = load_abundance_table(abundance, options.table);
    table = prevalence_filter(table, options.prevalence);
    if (table.kind == AbundanceKind::relative) table = to_counts(table, options.total_count, rng);

    Cohort cohort;
    cohort.sample_ids = table.sample_ids;
    cohort.tree = TaxonomyTree::from_lineages(table.taxa_lineages, options.rank_range);
    cohort.counts = as_count_matrix(table);

    if (metadata) {
        MetadataTable meta = load_metadata(*metadata);
        std::unordered_map<std::string, std::size_t> row_of_id;
        for (std::size_t i = 0; i < meta.sample_ids.size(); ++i) row_of_id[meta.sample_ids[i]] = i;
        std::vector<std::size_t> order;
        for (const auto& id : cohort.sample_ids) {
            auto it = row_of_id.find(id);
            if (it == row_of_id.end()) throw DataError("MissingSample", "sample '" + id + "' has no metadata row");
            order.push_back(it->second);
        }
        cohort.metadata = meta.select(order);
        if (cohort.metadata->has_column(options.label_column)) {
            std::tie(cohort.labels, cohort.label_names) = encode_labels(cohort.metadata->columns.at(options.label_column));
        }
    }
    if (cohort.labels.empty()) {
        cohort.labels.assign(cohort.sample_ids.size(), 0);
        cohort.label_names = {"all"};
    }
    return cohort;
}

}  // namespace taxapln
