#pragma once

#include <cstdint>
#include <memory>
#include <ostream>
#include <vector>

#include "taxapln/config.hpp"
#include "taxapln/ingest.hpp"
#include "taxapln/model.hpp"

namespace taxapln {

/// A cohort drawn from known per-label PLN-Trees, with its truth.
struct SimulatedCohort {
    AbundanceTable table;  ///< relative abundances, rare taxa included
    MetadataTable metadata;
    TaxonomyTree tree;     ///< truth tree (rare taxa excluded)
    std::vector<std::unique_ptr<PlnTreeModel>> truth;  ///< one per label
};

/// Three-level tree p__/g__/s__ from the config sizes.
TaxonomyTree simulation_tree(const SimulateConfig& config);

/// Truth model for one label. Labels above 0 shift a few latent means by `effect`.
std::unique_ptr<PlnTreeModel> simulation_truth(const TaxonomyTree& tree, const SimulateConfig& config, int label,
                                               std::uint64_t seed);

SimulatedCohort simulate_cohort(const SimulateConfig& config, std::uint64_t seed);

/// sample_id,age,sex,bmi,country,label
void write_metadata_csv(std::ostream& out, const MetadataTable& metadata);

}  // namespace taxapln
