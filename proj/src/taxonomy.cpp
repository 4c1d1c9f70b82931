#include "taxapln/taxonomy.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "taxapln/error.hpp"
#include "taxapln/random.hpp"

namespace taxapln {

namespace {

std::vector<std::string> split_lineage(const std::string& s) {
    std::vector<std::string> out;
    std::string::size_type start = 0;
    while (true) {
        const auto pos = s.find('|', start);
        out.push_back(s.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

std::string strip_rank_prefix(const std::string& segment) {
    // "s__Bacteroides_ovatus" -> "Bacteroides_ovatus"
    if (segment.size() > 3 && segment[1] == '_' && segment[2] == '_') return segment.substr(3);
    return segment;
}

}  // namespace

TaxonomyTree TaxonomyTree::from_lineages(const std::vector<std::string>& lineages,
                                         std::optional<std::pair<int, int>> rank_range) {
    if (lineages.empty()) throw DataError("EmptyInput", "no lineages supplied");

    std::vector<std::vector<std::string>> segments;
    segments.reserve(lineages.size());
    std::size_t width = 0;
    for (std::size_t i = 0; i < lineages.size(); ++i) {
        auto parts = split_lineage(lineages[i]);
        if (rank_range) {
            const auto [first, last] = *rank_range;
            if (first < 1 || last < first)
                throw ConfigError("InvalidRankRange", "rank range must satisfy 1 <= first <= last");
            if (static_cast<int>(parts.size()) < last)
                throw DataError("RaggedLineage", "lineage '" + lineages[i] + "' has fewer than " +
                                                     std::to_string(last) + " ranks");
            parts = std::vector<std::string>(parts.begin() + (first - 1), parts.begin() + last);
        }
        if (i == 0) width = parts.size();
        if (parts.size() != width)
            throw DataError("RaggedLineage", "lineage '" + lineages[i] + "' has " + std::to_string(parts.size()) +
                                                 " ranks, expected " + std::to_string(width));
        segments.push_back(std::move(parts));
    }

    TaxonomyTree tree;
    const int depth = static_cast<int>(width);
    tree.levels_.resize(depth);
    tree.parent_index_.resize(depth);

    std::vector<std::map<std::string, int>> index(depth);
    for (std::size_t i = 0; i < segments.size(); ++i) {
        std::string prefix;
        int parent = -1;
        for (int level = 0; level < depth; ++level) {
            prefix += (level ? "|" : "") + segments[i][level];
            auto& lookup = index[level];
            auto it = lookup.find(prefix);
            if (level == depth - 1 && it != lookup.end())
                throw DataError("DuplicateLeaf", "lineage '" + prefix + "' appears more than once");
            int k;
            if (it == lookup.end()) {
                k = static_cast<int>(tree.levels_[level].size());
                lookup.emplace(prefix, k);
                tree.levels_[level].push_back(Node{prefix, strip_rank_prefix(segments[i][level]), {}, parent});
                if (parent >= 0) tree.levels_[level - 1][parent].children.push_back(k);
            } else {
                k = it->second;
            }
            parent = k;
        }
    }
    for (int level = 0; level < depth; ++level) {
        auto& parents = tree.parent_index_[level];
        for (const auto& node : tree.levels_[level]) parents.push_back(node.parent);
    }
    return tree;
}

std::vector<int> TaxonomyTree::layer_sizes() const {
    std::vector<int> out;
    for (int l = 0; l < depth(); ++l) out.push_back(layer_size(l));
    return out;
}

int TaxonomyTree::max_layer_size() const {
    int m = 0;
    for (int l = 0; l < depth(); ++l) m = std::max(m, layer_size(l));
    return m;
}

std::vector<int> TaxonomyTree::leaf_descendants(int level, int k) const {
    std::vector<int> frontier{k};
    for (int l = level; l + 1 < depth(); ++l) {
        std::vector<int> next;
        for (int v : frontier)
            for (int c : children(l, v)) next.push_back(c);
        frontier = std::move(next);
    }
    std::sort(frontier.begin(), frontier.end());
    return frontier;
}

std::vector<std::string> TaxonomyTree::leaf_lineages() const {
    std::vector<std::string> out;
    for (const auto& leaf : levels_.back()) out.push_back(leaf.id);
    return out;
}

nlohmann::json TaxonomyTree::to_json() const {
    nlohmann::json nodes = nlohmann::json::array();
    for (int l = 0; l < depth(); ++l) {
        for (int k = 0; k < layer_size(l); ++k) {
            const auto& n = node(l, k);
            nodes.push_back({{"id", n.id}, {"name", n.name}, {"level", l}, {"index", k}, {"children", n.children}});
        }
    }
    return {{"depth", depth()}, {"layer_sizes", layer_sizes()}, {"nodes", nodes}};
}

std::uint64_t TaxonomyTree::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& s : leaf_lineages()) {
        h = fnv1a(s, h);
        h = fnv1a("\n", h);
    }
    return h;
}

bool TaxonomyTree::operator==(const TaxonomyTree& other) const {
    if (depth() != other.depth()) return false;
    for (int l = 0; l < depth(); ++l) {
        if (layer_size(l) != other.layer_size(l)) return false;
        for (int k = 0; k < layer_size(l); ++k) {
            const auto& a = node(l, k);
            const auto& b = other.node(l, k);
            if (a.id != b.id || a.name != b.name || a.children != b.children || a.parent != b.parent) return false;
        }
    }
    return true;
}

HierarchicalCounts aggregate_counts(const TaxonomyTree& tree, const Eigen::Ref<const CountVector>& leaf_counts) {
    if (leaf_counts.size() != tree.leaf_count())
        throw DataError("LengthMismatch", "expected " + std::to_string(tree.leaf_count()) + " leaf counts, got " +
                                              std::to_string(leaf_counts.size()));
    HierarchicalCounts out;
    out.levels.resize(tree.depth());
    out.levels.back() = leaf_counts;
    for (int l = tree.depth() - 2; l >= 0; --l) {
        out.levels[l] = CountVector::Zero(tree.layer_size(l));
        const auto& parents = tree.parents(l + 1);
        for (int j = 0; j < tree.layer_size(l + 1); ++j) out.levels[l][parents[j]] += out.levels[l + 1][j];
    }
    return out;
}

std::vector<CountMatrix> aggregate_levels(const TaxonomyTree& tree, const CountMatrix& leaf_counts) {
    if (leaf_counts.cols() != tree.leaf_count())
        throw DataError("LengthMismatch", "expected " + std::to_string(tree.leaf_count()) + " leaf columns, got " +
                                              std::to_string(leaf_counts.cols()));
    std::vector<CountMatrix> out(tree.depth());
    out.back() = leaf_counts;
    for (int l = tree.depth() - 2; l >= 0; --l) {
        out[l] = CountMatrix::Zero(leaf_counts.rows(), tree.layer_size(l));
        const auto& parents = tree.parents(l + 1);
        for (int j = 0; j < tree.layer_size(l + 1); ++j) out[l].col(parents[j]) += out[l + 1].col(j);
    }
    return out;
}

std::optional<HierarchyViolation> validate_hierarchy(const TaxonomyTree& tree, const HierarchicalCounts& counts) {
    if (static_cast<int>(counts.levels.size()) != tree.depth())
        throw DataError("ShapeMismatch", "counts have " + std::to_string(counts.levels.size()) + " levels, tree has " +
                                             std::to_string(tree.depth()));
    for (int l = 0; l < tree.depth(); ++l)
        if (counts.levels[l].size() != tree.layer_size(l))
            throw DataError("ShapeMismatch", "level " + std::to_string(l) + " has wrong length");
    for (int l = 0; l + 1 < tree.depth(); ++l) {
        for (int k = 0; k < tree.layer_size(l); ++k) {
            std::int64_t sum = 0;
            for (int c : tree.children(l, k)) sum += counts.levels[l + 1][c];
            if (sum != counts.levels[l][k]) return HierarchyViolation{l, k, counts.levels[l][k], sum};
        }
    }
    return std::nullopt;
}

std::optional<std::pair<Eigen::Index, HierarchyViolation>> validate_levels(const TaxonomyTree& tree,
                                                                           const std::vector<CountMatrix>& levels) {
    if (levels.empty()) throw DataError("ShapeMismatch", "no levels");
    for (Eigen::Index i = 0; i < levels.front().rows(); ++i) {
        if (auto v = validate_hierarchy(tree, row_of(levels, i))) return std::make_pair(i, *v);
    }
    return std::nullopt;
}

HierarchicalCounts row_of(const std::vector<CountMatrix>& levels, Eigen::Index row) {
    HierarchicalCounts out;
    for (const auto& m : levels) out.levels.push_back(m.row(row).transpose());
    return out;
}

}  // namespace taxapln
