#include <map>
#include <set>

#include "doctest.h"
#include "taxapln/error.hpp"
#include "taxapln/random.hpp"
#include "taxapln/taxonomy.hpp"

using namespace taxapln;

namespace {

std::vector<std::string> random_lineages(Rng& rng, int depth, int leaves) {
    std::uniform_int_distribution<int> branch(0, 2);
    std::set<std::string> seen;
    std::vector<std::string> out;
    while (static_cast<int>(out.size()) < leaves) {
        std::string s;
        for (int l = 0; l < depth; ++l) {
            if (l) s += "|";
            s += std::string(1, static_cast<char>('a' + l)) + "__t" + std::to_string(branch(rng));
        }
        if (seen.insert(s).second) out.push_back(s);
    }
    return out;
}

}  // namespace

TEST_CASE("prefix deduplication") {
    const auto t = TaxonomyTree::from_lineages({"A|a|x", "A|a|y", "A|b|z"});
    CHECK(t.depth() == 3);
    CHECK(t.layer_sizes() == std::vector<int>{1, 2, 3});
    CHECK(t.node(1, 0).name == "a");
    CHECK(t.children(1, 0) == std::vector<int>{0, 1});
    CHECK(t.children(1, 1) == std::vector<int>{2});
    CHECK(t.parents(2) == std::vector<int>{0, 0, 1});
    CHECK(t.leaf_descendants(0, 0) == std::vector<int>{0, 1, 2});
}

TEST_CASE("single lineage is a chain") {
    const auto t = TaxonomyTree::from_lineages({"A|a|x"});
    CHECK(t.layer_sizes() == std::vector<int>{1, 1, 1});
}

TEST_CASE("rank prefixes display stripped but keep identity") {
    // same display name under different parents are different nodes
    const auto t = TaxonomyTree::from_lineages({"k__B|g__X|s__y", "k__B|g__Z|s__y"});
    CHECK(t.layer_sizes() == std::vector<int>{1, 2, 2});
    CHECK(t.node(2, 0).name == "y");
    CHECK(t.node(2, 0).id != t.node(2, 1).id);
}

TEST_CASE("rank range restricts the levels") {
    const auto t = TaxonomyTree::from_lineages({"K|P|a|x", "K|P|a|y", "K|P|b|z"}, std::make_pair(3, 4));
    CHECK(t.layer_sizes() == std::vector<int>{2, 3});
}

TEST_CASE("malformed lineages") {
    CHECK_THROWS_AS(TaxonomyTree::from_lineages({}), DataError);
    CHECK_THROWS_AS(TaxonomyTree::from_lineages({"A|a|x", "A|b"}), DataError);
    CHECK_THROWS_AS(TaxonomyTree::from_lineages({"A|a|x", "A|a|x"}), DataError);
    try {
        TaxonomyTree::from_lineages({"A|a|x", "A|a|x"});
    } catch (const Error& e) {
        CHECK(e.code() == "DuplicateLeaf");
    }
}

TEST_CASE("reparsing the leaf lineages is idempotent") {
    Rng rng(1);
    for (int rep = 0; rep < 20; ++rep) {
        const auto t = TaxonomyTree::from_lineages(random_lineages(rng, 4, 12));
        const auto again = TaxonomyTree::from_lineages(t.leaf_lineages());
        CHECK(t == again);
        CHECK(t.hash() == again.hash());
        const auto thrice = TaxonomyTree::from_lineages(again.leaf_lineages());
        CHECK(thrice.leaf_lineages() == t.leaf_lineages());
    }
}

TEST_CASE("child sets partition each next level") {
    Rng rng(2);
    const auto t = TaxonomyTree::from_lineages(random_lineages(rng, 5, 30));
    for (int l = 0; l + 1 < t.depth(); ++l) {
        std::vector<int> hit(t.layer_size(l + 1), 0);
        for (int k = 0; k < t.layer_size(l); ++k)
            for (int c : t.children(l, k)) ++hit[c];
        for (int h : hit) CHECK(h == 1);
    }
}

TEST_CASE("aggregation") {
    const auto t = TaxonomyTree::from_lineages({"A|a|x", "A|a|y", "A|b|z"});
    CountVector leaves(3);
    leaves << 2, 3, 5;
    const auto h = aggregate_counts(t, leaves);
    CHECK(h.levels[1] == (CountVector(2) << 5, 5).finished());
    CHECK(h.levels[0](0) == 10);
    CHECK_FALSE(validate_hierarchy(t, h).has_value());

    const auto zero = aggregate_counts(t, CountVector::Zero(3));
    for (const auto& v : zero.levels) CHECK(v.isZero());
    CHECK_FALSE(validate_hierarchy(t, zero).has_value());

    CHECK_THROWS_AS(aggregate_counts(t, CountVector::Zero(2)), DataError);
}

TEST_CASE("perturbed leaf is reported at its parent") {
    const auto t = TaxonomyTree::from_lineages({"A|a|x", "A|a|y", "A|b|z"});
    CountVector leaves(3);
    leaves << 2, 3, 5;
    auto h = aggregate_counts(t, leaves);
    h.levels[2](2) += 1;
    const auto v = validate_hierarchy(t, h);
    REQUIRE(v.has_value());
    CHECK(v->level == 1);
    CHECK(v->node == 1);
    CHECK(v->parent_value == 5);
    CHECK(v->children_sum == 6);

    HierarchicalCounts bad;
    bad.levels = {CountVector::Zero(1), CountVector::Zero(3), CountVector::Zero(3)};
    CHECK_THROWS_AS(validate_hierarchy(t, bad), DataError);
}

TEST_CASE("aggregation matches a per-node leaf loop") {
    Rng rng(3);
    std::uniform_int_distribution<int> count(0, 1000);
    for (int rep = 0; rep < 10; ++rep) {
        const auto lineages = random_lineages(rng, 4, 15);
        const auto t = TaxonomyTree::from_lineages(lineages);
        CountVector leaves(t.leaf_count());
        for (auto& x : leaves) x = count(rng);
        const auto h = aggregate_counts(t, leaves);
        // oracle: a node's count is the sum over leaves whose lineage starts with its id
        for (int l = 0; l < t.depth(); ++l)
            for (int k = 0; k < t.layer_size(l); ++k) {
                const std::string& id = t.node(l, k).id;
                std::int64_t expect = 0;
                for (int j = 0; j < t.leaf_count(); ++j) {
                    const std::string& leaf = t.node(t.depth() - 1, j).id;
                    if (leaf.compare(0, id.size(), id) == 0 && (leaf.size() == id.size() || leaf[id.size()] == '|'))
                        expect += leaves(j);
                }
                CHECK(h.levels[l](k) == expect);
            }
        CHECK_FALSE(validate_hierarchy(t, h).has_value());

        CountMatrix batch(3, t.leaf_count());
        for (Eigen::Index i = 0; i < batch.size(); ++i) batch.data()[i] = count(rng);
        const auto levels = aggregate_levels(t, batch);
        CHECK_FALSE(validate_levels(t, levels).has_value());
        const auto r1 = row_of(levels, 1);
        CHECK(r1.levels[0] == aggregate_counts(t, batch.row(1).transpose()).levels[0]);
    }
}

TEST_CASE("json document lists nodes per level") {
    const auto t = TaxonomyTree::from_lineages({"A|a|x", "A|a|y", "A|b|z"});
    const auto j = t.to_json();
    CHECK(j.dump().find("\"children\"") != std::string::npos);
}
