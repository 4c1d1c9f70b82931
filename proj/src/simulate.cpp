#include "taxapln/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "taxapln/error.hpp"

namespace taxapln {

namespace {

std::string genus_name(int p, int g) { return "p__P" + std::to_string(p + 1) + "|g__G" + std::to_string(p + 1) + "_" + std::to_string(g + 1); }

}  // namespace

TaxonomyTree simulation_tree(const SimulateConfig& config) {
    std::vector<std::string> lineages;
    for (int p = 0; p < config.phyla; ++p)
        for (int g = 0; g < config.genera_per_phylum; ++g)
            for (int s = 0; s < config.species_per_genus; ++s)
                lineages.push_back(genus_name(p, g) + "|s__S" + std::to_string(p + 1) + "_" + std::to_string(g + 1) + "_" +
                                   std::to_string(s + 1));
    return TaxonomyTree::from_lineages(lineages);
}

std::unique_ptr<PlnTreeModel> simulation_truth(const TaxonomyTree& tree, const SimulateConfig& config, int label,
                                               std::uint64_t seed) {
    ModelConfig mc;
    mc.gru_hidden = 4;
    mc.head_width = 4;
    // the structure is shared across labels, only the shift depends on the label
    auto model = std::make_unique<PlnTreeModel>(tree, mc, derive_seed(seed, "truth"));
    Rng rng = make_rng(seed, "truth-params");
    const int K1 = tree.layer_size(0);
    model->top_mean.value = Matrix::Constant(1, K1, config.top_mean) + 0.3 * standard_normal(1, K1, rng);
    model->top_factor.value = 0.1 * standard_normal(K1, K1, rng);
    model->top_factor.value.diagonal().setConstant(std::log(0.5));
    const double var_bias = std::log(std::expm1(0.25));  // softplus^-1 of 0.25
    for (std::size_t l = 0; l < model->dynamics.size(); ++l) {
        auto& d = model->dynamics[l];
        const int K = static_cast<int>(d.bias.value.cols()) / 2;
        d.weight.value = 0.05 * standard_normal(d.weight.value.rows(), d.weight.value.cols(), rng);
        d.bias.value.leftCols(K) = 0.7 * standard_normal(1, K, rng);
        d.bias.value.rightCols(K).setConstant(var_bias);
    }
    if (label > 0) {
        model->top_mean.value(0, 0) += config.effect;
        auto& leaf = model->dynamics.back().bias.value;
        const int K = static_cast<int>(leaf.cols()) / 2;
        for (int k = 0; k < K; k += 3) leaf(0, k) += (k / 3) % 2 == 0 ? config.effect : -config.effect;
    }
    return model;
}

SimulatedCohort simulate_cohort(const SimulateConfig& config, std::uint64_t seed) {
    SimulatedCohort out;
    out.tree = simulation_tree(config);
    const auto leaf_names = out.tree.leaf_lineages();
    const int M = static_cast<int>(config.samples.size());
    Eigen::Index n = 0;
    for (int s : config.samples) n += s;

    std::vector<std::string> rare;
    for (int r = 0; r < config.rare_taxa; ++r)
        rare.push_back(genus_name(r % config.phyla, 0) + "|s__R" + std::to_string(r + 1));

    const auto K = static_cast<Eigen::Index>(leaf_names.size());
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, K + static_cast<Eigen::Index>(rare.size()));
    std::vector<std::string> labels;
    Eigen::Index row = 0;
    for (int c = 0; c < M; ++c) {
        out.truth.push_back(simulation_truth(out.tree, config, c, seed));
        Rng rng = make_rng(seed, "simulate", {static_cast<std::uint64_t>(c)});
        const auto levels = out.truth.back()->sample_prior(config.samples[static_cast<std::size_t>(c)], Matrix(), rng);
        counts.block(row, 0, levels.back().rows(), K) = levels.back().cast<double>();
        row += levels.back().rows();
        for (int i = 0; i < config.samples[static_cast<std::size_t>(c)]; ++i) labels.push_back(std::to_string(c));
    }

    Rng rng = make_rng(seed, "simulate-rare");
    const auto present = static_cast<Eigen::Index>(std::floor(config.rare_prevalence * static_cast<double>(n)));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (std::size_t r = 0; r < rare.size(); ++r) {
        std::shuffle(order.begin(), order.end(), rng);
        for (Eigen::Index k = 0; k < present; ++k) {
            const Eigen::Index i = order[static_cast<std::size_t>(k)];
            counts(i, K + static_cast<Eigen::Index>(r)) = std::max(1.0, std::round(0.002 * counts.row(i).head(K).sum()));
        }
    }

    for (Eigen::Index i = 0; i < n; ++i) {
        const double s = counts.row(i).sum();
        if (!(s > 0.0)) throw NumericError("EmptySample", "simulated sample " + std::to_string(i) + " has no reads");
        counts.row(i) /= s;
    }

    out.table.kind = AbundanceKind::relative;
    out.table.values = counts;
    out.table.taxa_lineages = leaf_names;
    out.table.taxa_lineages.insert(out.table.taxa_lineages.end(), rare.begin(), rare.end());

    const std::vector<std::string> ages{"child", "schoolage", "adult", "senior"};
    const std::vector<std::string> countries{"FRA", "ITA", "USA"};
    Rng meta_rng = make_rng(seed, "simulate-metadata");
    std::uniform_int_distribution<std::size_t> age(0, ages.size() - 1), country(0, countries.size() - 1);
    std::bernoulli_distribution sex(0.5);
    std::normal_distribution<double> bmi(24.0, 4.0);
    auto& cols = out.metadata.columns;
    for (Eigen::Index i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "S%03ld", static_cast<long>(i + 1));
        out.table.sample_ids.push_back(id);
        out.metadata.sample_ids.push_back(id);
        cols["age"].push_back(ages[age(meta_rng)]);
        cols["sex"].push_back(sex(meta_rng) ? "M" : "F");
        char b[16];
        std::snprintf(b, sizeof b, "%.1f", std::clamp(bmi(meta_rng), 15.0, 45.0));
        cols["bmi"].push_back(b);
        cols["country"].push_back(countries[country(meta_rng)]);
        cols["label"].push_back(labels[static_cast<std::size_t>(i)]);
    }
    return out;
}

void write_metadata_csv(std::ostream& out, const MetadataTable& metadata) {
    std::vector<std::string> names{"age", "sex", "bmi", "country", "label"};
    for (const auto& [name, values] : metadata.columns)
        if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
    out << "sample_id";
    for (const auto& name : names)
        if (metadata.has_column(name)) out << ',' << name;
    out << '\n';
    for (std::size_t i = 0; i < metadata.sample_ids.size(); ++i) {
        out << metadata.sample_ids[i];
        for (const auto& name : names)
            if (metadata.has_column(name)) out << ',' << metadata.cell(name, i);
        out << '\n';
    }
}

}  // namespace taxapln
