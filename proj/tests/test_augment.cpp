#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>

#include "doctest.h"
#include "taxapln/augment.hpp"
#include "taxapln/error.hpp"

using namespace taxapln;

namespace {

std::string code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return "";
}

TaxonomyTree small_tree() {
    return TaxonomyTree::from_lineages({"A|a|x", "A|a|y", "A|b|z", "B|c|w", "B|c|v", "B|d|u", "B|d|t"});
}

CountMatrix random_counts(Eigen::Index n, Eigen::Index k, int hi, Rng& rng) {
    std::uniform_int_distribution<int> u(0, hi);
    CountMatrix m(n, k);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

Eigen::VectorXd simplex(Eigen::Index k, Rng& rng) {
    std::exponential_distribution<double> e(1.0);
    Eigen::VectorXd p(k);
    for (Eigen::Index i = 0; i < k; ++i) p(i) = e(rng);
    return p / p.sum();
}

bool is_ancestor(const TaxonomyTree& tree, int la, int ka, int lb, int kb) {
    // walk b upwards to level la
    int k = kb;
    for (int l = lb; l > la; --l) k = tree.parents(l)[static_cast<std::size_t>(k)];
    return lb > la && k == ka;
}

}  // namespace

TEST_CASE("vamp sampling") {
    const auto tree = small_tree();
    PlnTreeModel model(tree, {}, 4);
    Rng rng(1);

    SUBCASE("singleton training set") {
        const auto one = make_model_data(tree, random_counts(1, 7, 30, rng));
        const auto s = vamp_sample(model, one, 200, rng);
        CHECK(std::all_of(s.anchors.begin(), s.anchors.end(), [](Eigen::Index a) { return a == 0; }));
        CHECK(s.leaves().rows() == 200);
        CHECK_FALSE(validate_levels(tree, s.levels).has_value());
        // noise still moves the outputs
        CHECK((s.leaves().row(0) - s.leaves().row(1)).cwiseAbs().sum() + (s.leaves().row(2) - s.leaves().row(3)).cwiseAbs().sum() > 0);
    }
    SUBCASE("anchors are uniform") {
        const auto train = make_model_data(tree, random_counts(10, 7, 30, rng));
        const auto s = vamp_sample(model, train, 10000, rng);
        CHECK_FALSE(validate_levels(tree, s.levels).has_value());
        std::vector<double> hist(10, 0.0);
        for (auto a : s.anchors) hist[static_cast<std::size_t>(a)] += 1;
        double chi2 = 0;
        for (double h : hist) chi2 += (h - 1000.0) * (h - 1000.0) / 1000.0;
        CHECK(chi2 < 21.666);  // chi-square, 9 df, alpha 0.01
    }
    SUBCASE("covariates follow the anchor") {
        ModelConfig cfg;
        cfg.covariates = 2;
        PlnTreeModel cond(tree, cfg, 4);
        Matrix cov(3, 2);
        cov << 0, 1, 2, 3, 4, 5;
        const auto train = make_model_data(tree, random_counts(3, 7, 30, rng), cov);
        const auto s = vamp_sample(cond, train, 50, rng);
        for (Eigen::Index k = 0; k < 50; ++k) CHECK(s.covariates.row(k) == cov.row(s.anchors[static_cast<std::size_t>(k)]));
    }
    CHECK(code_of([&] { vamp_sample(model, make_model_data(tree, CountMatrix(0, 7)), 3, rng); }) == "EmptyTrainingSet");
}

TEST_CASE("prior sampling") {
    const auto tree = small_tree();
    PlnTreeModel model(tree, {}, 5);
    Rng a(9), b(9);
    const auto s1 = prior_sample(model, 300, a), s2 = prior_sample(model, 300, b);
    CHECK(s1.leaves() == s2.leaves());
    CHECK_FALSE(validate_levels(tree, s1.levels).has_value());

    // top-level Poisson log-normal moment: E X = exp(mu + sigma^2 / 2)
    PlnTreeModel m2(TaxonomyTree::from_lineages({"A|x", "A|y"}), {}, 6);
    const double mu = 2.0, sigma = 0.3;
    m2.top_mean.value << mu;
    m2.top_factor.value << std::log(sigma);
    for (auto& d : m2.dynamics) d.weight.value.setZero();
    Rng r(10);
    const int n = 10000;
    const auto s = prior_sample(m2, n, r);
    const Eigen::VectorXd x = s.levels[0].col(0).cast<double>();
    const double mean = x.mean();
    const double se = std::sqrt((x.array() - mean).square().sum() / (n - 1) / n);
    CHECK(std::abs(mean - std::exp(mu + sigma * sigma / 2)) < 4 * se);
}

TEST_CASE("vanilla mixup") {
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        const auto xi = simplex(6, rng), xj = simplex(6, rng);
        CHECK(vanilla_mixup(xi, xj, 1.0) == xi);
        CHECK(vanilla_mixup(xi, xj, 0.0) == xj);
        const double lambda = beta_draw(2, 2, rng);
        CHECK(std::abs(vanilla_mixup(xi, xj, lambda).sum() - 1.0) < 1e-12);
        CHECK((vanilla_mixup(xi, xi, lambda) - xi).cwiseAbs().maxCoeff() < 1e-15);
    }
}

TEST_CASE("compositional cutmix") {
    Rng rng(3);
    const auto xi = simplex(5, rng), xj = simplex(5, rng);
    const auto all_i = cutmix_partition(xi, xj, std::vector<bool>(5, true));
    CHECK((all_i.x - xi).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(all_i.weight_i == 1.0);
    for (int t = 0; t < 100; ++t) {
        const auto a = simplex(5, rng), b = simplex(5, rng);
        const auto m = compositional_cutmix(a, b, rng);
        CHECK(std::abs(m.x.sum() - 1.0) < 1e-12);
        CHECK(m.weight_i >= 0.0);
        CHECK(m.weight_i <= 1.0);
        CHECK((compositional_cutmix(a, a, rng).x - a).cwiseAbs().maxCoeff() < 1e-12);
    }
    // soft label is the renormalised mass share
    Eigen::VectorXd p(3), q(3);
    p << 0.5, 0.5, 0.0;
    q << 0.2, 0.2, 0.6;
    const auto m = cutmix_partition(p, q, {true, false, false});
    CHECK(m.weight_i == doctest::Approx(0.5 / 1.3));
    CHECK(m.x(2) == doctest::Approx(0.6 / 1.3));
    Eigen::VectorXd r(3);
    r << 0.0, 0.0, 1.0;
    CHECK(code_of([&] { cutmix_partition(p, r, {false, false, true}); }) == "DegenerateMix");
}

TEST_CASE("phylomix") {
    const auto tree = small_tree();
    Rng rng(4);
    const auto xi = simplex(7, rng), xj = simplex(7, rng);
    CHECK((phylomix(xi, xj, tree, 1.0, rng).x - xi).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((phylomix(xi, xj, tree, 0.0, rng).x - xj).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(phylomix(xi, xj, tree, 0.3, rng).weight_i == 0.3);

    // independent checker: chosen nodes are pairwise unrelated and cover the budget
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 1000; ++t) {
        const double lambda = u(rng);
        const auto nodes = phylomix_nodes(tree, lambda, rng);
        std::set<int> leaves;
        std::size_t total = 0;
        for (std::size_t a = 0; a < nodes.size(); ++a) {
            const auto d = tree.leaf_descendants(nodes[a].first, nodes[a].second);
            total += d.size();
            leaves.insert(d.begin(), d.end());
            for (std::size_t b = 0; b < nodes.size(); ++b)
                if (a != b)
                    CHECK_FALSE(is_ancestor(tree, nodes[a].first, nodes[a].second, nodes[b].first, nodes[b].second));
        }
        CHECK(leaves.size() == total);
        CHECK(static_cast<long>(total) == std::lround((1 - lambda) * 7));
        const auto m = phylomix(xi, xj, tree, lambda, rng);
        CHECK(std::abs(m.x.sum() - 1.0) < 1e-12);
    }
}

TEST_CASE("label split arithmetic") {
    std::vector<int> labels(125, 0);
    std::fill(labels.begin() + 60, labels.end(), 1);
    CHECK(synthetic_label_counts(labels, 2, 2.0) == std::vector<Eigen::Index>{60, 65});
    CHECK(synthetic_label_counts(labels, 2, 1.0) == std::vector<Eigen::Index>{0, 0});
    // 7 / 3 / 1 at beta 1.5 -> 5.5 total rounds to 6, quotas 3.818, 1.636, 0.545
    std::vector<int> three{0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 2};
    CHECK(synthetic_label_counts(three, 3, 1.5) == std::vector<Eigen::Index>{4, 2, 0});
    CHECK(code_of([&] { synthetic_label_counts(labels, 2, 0.5); }) == "InvalidRatio");
}

TEST_CASE("dataset augmentation") {
    const auto tree = small_tree();
    Rng rng(5);
    LabeledData data;
    data.counts = random_counts(100, 7, 40, rng);
    data.labels.resize(100);
    for (int i = 0; i < 100; ++i) data.labels[static_cast<std::size_t>(i)] = i < 40 ? 0 : 1;
    data.label_count = 2;

    SUBCASE("beta one keeps the data") {
        for (const auto& s : {"none", "copy", "mixup", "cutmix", "phylomix"}) {
            const auto out = augment_dataset(data, tree, s, 1.0, 7);
            CHECK(out.synthetic_rows() == 0);
            CHECK(out.counts == data.counts);
            CHECK(out.labels == data.labels);
        }
    }
    SUBCASE("mixup family at beta two") {
        for (const auto& s : {"copy", "mixup", "cutmix", "phylomix"}) {
            const auto out = augment_dataset(data, tree, s, 2.0, 7);
            REQUIRE(out.synthetic_rows() == 100);
            CHECK(std::count(out.labels.begin(), out.labels.end(), 0) == 80);
            for (Eigen::Index r = 100; r < 200; ++r) {
                const auto& prov = out.provenance[static_cast<std::size_t>(r)];
                CHECK(prov.source == s);
                for (auto d : prov.donors) CHECK(data.labels[static_cast<std::size_t>(d)] == out.labels[static_cast<std::size_t>(r)]);
                if (std::string(s) != "copy") CHECK(out.counts.row(r).sum() == 100000);
            }
            const auto again = augment_dataset(data, tree, s, 2.0, 7);
            CHECK(again.counts == out.counts);
        }
        const auto copy = augment_dataset(data, tree, "copy", 2.0, 7);
        for (Eigen::Index r = 100; r < 200; ++r)
            CHECK(copy.counts.row(r) == data.counts.row(copy.provenance[static_cast<std::size_t>(r)].donors[0]));
    }
    SUBCASE("cross-label mixup carries soft labels") {
        AugmentOptions opt;
        opt.cross_label = true;
        const auto out = augment_dataset(data, tree, "mixup", 2.0, 7, {}, opt);
        bool mixed = false;
        for (Eigen::Index r = 100; r < 200; ++r) {
            CHECK(out.soft_labels.row(r).sum() == doctest::Approx(1.0));
            mixed = mixed || (out.soft_labels(r, 0) > 0 && out.soft_labels(r, 1) > 0);
        }
        CHECK(mixed);
    }
    SUBCASE("model strategies") {
        PlnTreeModel m0(tree, {}, 1), m1(tree, {}, 2);
        const auto out = augment_dataset(data, tree, "taxapln", 2.0, 7, {&m0, &m1});
        REQUIRE(out.synthetic_rows() == 100);
        const auto levels = aggregate_levels(tree, out.counts);
        CHECK_FALSE(validate_levels(tree, levels).has_value());
        const auto prior = augment_dataset(data, tree, "taxapln-prior", 1.5, 7, {&m0, &m1});
        CHECK(prior.synthetic_rows() == 50);
        CHECK(prior.provenance.back().donors.empty());
        CHECK(code_of([&] { augment_dataset(data, tree, "taxapln", 2.0, 7, {&m0}); }) == "MissingLabelModel");
        CHECK(code_of([&] { augment_dataset(data, tree, "taxapln-c", 2.0, 7, {&m0, &m1}); }) == "MissingCovariates");

        std::ostringstream csv;
        write_provenance_csv(csv, out);
        const std::string text = csv.str();
        CHECK(std::count(text.begin(), text.end(), '\n') == 101);
    }
    CHECK(code_of([&] { augment_dataset(data, tree, "gan", 2.0, 7); }) == "UnknownStrategy");
    CHECK(code_of([&] { augment_dataset(data, tree, "mixup", 0.9, 7); }) == "InvalidRatio");
}
