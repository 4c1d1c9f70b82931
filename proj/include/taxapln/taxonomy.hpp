#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace taxapln {

using CountVector = Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>;
using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

/// Immutable rooted hierarchy over taxa. Levels are 0-based internally:
/// level 0 is the coarsest rank kept, level depth()-1 holds the leaves, and
/// leaf j is the j-th lineage handed to parse_lineages().
class TaxonomyTree {
public:
    struct Node {
        std::string id;    ///< full lineage prefix, rank prefixes kept (identity)
        std::string name;  ///< last segment with any "x__" rank prefix stripped
        std::vector<int> children;
        int parent = -1;
    };

    /// Builds a tree from pipe-delimited lineages restricted to the 1-based
    /// inclusive rank range [first_rank, last_rank]. A missing range means
    /// every segment.
    static TaxonomyTree from_lineages(const std::vector<std::string>& lineages,
                                      std::optional<std::pair<int, int>> rank_range = std::nullopt);

    int depth() const { return static_cast<int>(levels_.size()); }
    int layer_size(int level) const { return static_cast<int>(levels_.at(level).size()); }
    std::vector<int> layer_sizes() const;
    int leaf_count() const { return layer_size(depth() - 1); }
    int max_layer_size() const;

    const Node& node(int level, int k) const { return levels_.at(level).at(k); }
    const std::vector<int>& children(int level, int k) const { return node(level, k).children; }
    /// Parent index at level-1 of every node at `level` (level >= 1).
    const std::vector<int>& parents(int level) const { return parent_index_.at(level); }

    /// Leaf indices under node (level, k), in leaf order.
    std::vector<int> leaf_descendants(int level, int k) const;

    /// Lineage strings for the leaves over the retained rank range; parsing
    /// them again with no range yields an identical tree.
    std::vector<std::string> leaf_lineages() const;

    nlohmann::json to_json() const;
    /// FNV-1a over the canonical leaf lineage list.
    std::uint64_t hash() const;

    bool operator==(const TaxonomyTree& other) const;

private:
    std::vector<std::vector<Node>> levels_;
    std::vector<std::vector<int>> parent_index_;
};

/// One sample's abundances at every level.
struct HierarchicalCounts {
    std::vector<CountVector> levels;
};

struct HierarchyViolation {
    int level = -1;  ///< parent level
    int node = -1;   ///< parent index
    std::int64_t parent_value = 0;
    std::int64_t children_sum = 0;
};

HierarchicalCounts aggregate_counts(const TaxonomyTree& tree, const Eigen::Ref<const CountVector>& leaf_counts);

/// Batched aggregation: one n x K_l matrix per level, rows are samples.
std::vector<CountMatrix> aggregate_levels(const TaxonomyTree& tree, const CountMatrix& leaf_counts);

/// First parent-sum violation, or nullopt when the hierarchy is exact.
std::optional<HierarchyViolation> validate_hierarchy(const TaxonomyTree& tree, const HierarchicalCounts& counts);

/// Row-wise validation of batched level matrices; returns the row and
/// violation of the first failure.
std::optional<std::pair<Eigen::Index, HierarchyViolation>> validate_levels(const TaxonomyTree& tree,
                                                                           const std::vector<CountMatrix>& levels);

HierarchicalCounts row_of(const std::vector<CountMatrix>& levels, Eigen::Index row);

}  // namespace taxapln
