#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxapln/eval.hpp"
#include "taxapln/ingest.hpp"
#include "taxapln/model.hpp"

namespace taxapln {

struct DiversityConfig {
    int samples = 500;  ///< synthetic draws per strategy, split across labels
    std::vector<std::string> strategies{"taxapln", "taxapln-prior", "pln", "mixup", "cutmix", "phylomix"};
    int pcoa_dims = 2;
    double pseudocount = 1.0;
};

struct GradcheckConfig {
    int probes = 100;
    double step = 1e-4;
    double threshold = 1e-4;
    int rows = 8;  ///< cohort rows fed to the ELBO
    /// Rows are redrawn at this depth first (0 keeps them). Central differences
    /// lose about eps |ELBO| / step, and the ELBO grows with the depth.
    std::int64_t total_count = 100;
};

/// Shape of the self-generated cohorts of `simulate`.
struct SimulateConfig {
    std::vector<int> samples{55, 45};  ///< per label, labels are "0", "1", ...
    int phyla = 3;
    int genera_per_phylum = 2;
    int species_per_genus = 3;
    /// Extra species present in a small fraction of samples, removed by the prevalence filter.
    int rare_taxa = 3;
    double rare_prevalence = 0.05;
    double top_mean = 8.0;  ///< log-intensity of a top-level taxon
    double effect = 0.4;    ///< label shift on the latent means
};

struct SweepConfig {
    std::vector<double> betas{1, 2, 3, 4, 5};
    std::vector<double> fractions{0.05, 0.10, 0.15, 0.20, 0.25, 0.30};
    std::string strategy = "taxapln";
    std::string classifier = "logreg";
};

struct RunConfig {
    std::string abundance;
    std::string metadata;
    AbundanceKind abundance_kind = AbundanceKind::relative;
    bool samples_in_rows = false;
    std::optional<std::pair<int, int>> rank_range;
    double prevalence = 0.15;
    std::int64_t total_count = 100000;
    std::string label_column = "label";

    /// Fit covariate-conditioned models in `fit`.
    bool conditional = false;
    std::string model_kind = "plntree";
    ModelConfig model;
    TrainConfig train{1e-3, 5.0, 512, 2000, 1, 0};

    std::string strategy = "taxapln";
    double beta = 2.0;
    CvConfig cv;
    DiversityConfig diversity;
    GradcheckConfig gradcheck;
    SimulateConfig simulate;
    SweepConfig sweep;

    std::string out = "out";
    std::uint64_t seed = 0;

    /// Relative input paths resolve against this directory (not serialised).
    std::filesystem::path base_dir;

    std::filesystem::path abundance_path() const;
    std::filesystem::path metadata_path() const;
    CohortOptions cohort_options() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Parses a config file; the file's directory becomes base_dir.
RunConfig load_run_config(const std::filesystem::path& path);

/// Throws ConfigError on any out-of-range or unknown setting.
void validate(const RunConfig& c);

}  // namespace taxapln
