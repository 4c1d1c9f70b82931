#include "taxapln/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "taxapln/augment.hpp"
#include "taxapln/error.hpp"

namespace taxapln {

std::filesystem::path RunConfig::abundance_path() const {
    const std::filesystem::path p(abundance);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

std::filesystem::path RunConfig::metadata_path() const {
    if (metadata.empty()) return {};
    const std::filesystem::path p(metadata);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
}

CohortOptions RunConfig::cohort_options() const {
    CohortOptions o;
    o.table.kind = abundance_kind;
    o.table.samples_in_rows = samples_in_rows;
    o.rank_range = rank_range;
    o.prevalence = prevalence;
    o.total_count = total_count;
    o.label_column = label_column;
    return o;
}

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError("InvalidConfig", where + " must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw ConfigError("UnknownKey", "unknown key '" + key + "' in " + where);
}

}  // namespace

void to_json(nlohmann::json& j, const RunConfig& c) {
    json cv = c.cv;
    j = {{"abundance", c.abundance},
         {"metadata", c.metadata},
         {"abundance_kind", c.abundance_kind == AbundanceKind::counts ? "counts" : "relative"},
         {"samples_in_rows", c.samples_in_rows},
         {"rank_range", c.rank_range ? json::array({c.rank_range->first, c.rank_range->second}) : json(nullptr)},
         {"prevalence", c.prevalence},
         {"total_count", c.total_count},
         {"label_column", c.label_column},
         {"conditional", c.conditional},
         {"model_kind", c.model_kind},
         {"model", c.model},
         {"train", c.train},
         {"strategy", c.strategy},
         {"beta", c.beta},
         {"cv", cv},
         {"diversity",
          {{"samples", c.diversity.samples},
           {"strategies", c.diversity.strategies},
           {"pcoa_dims", c.diversity.pcoa_dims},
           {"pseudocount", c.diversity.pseudocount}}},
         {"gradcheck",
          {{"probes", c.gradcheck.probes},
           {"step", c.gradcheck.step},
           {"threshold", c.gradcheck.threshold},
           {"rows", c.gradcheck.rows},
           {"total_count", c.gradcheck.total_count}}},
         {"simulate",
          {{"samples", c.simulate.samples},
           {"phyla", c.simulate.phyla},
           {"genera_per_phylum", c.simulate.genera_per_phylum},
           {"species_per_genus", c.simulate.species_per_genus},
           {"rare_taxa", c.simulate.rare_taxa},
           {"rare_prevalence", c.simulate.rare_prevalence},
           {"top_mean", c.simulate.top_mean},
           {"effect", c.simulate.effect}}},
         {"sweep",
          {{"betas", c.sweep.betas},
           {"fractions", c.sweep.fractions},
           {"strategy", c.sweep.strategy},
           {"classifier", c.sweep.classifier}}},
         {"out", c.out},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    check_keys(j,
               {"abundance", "metadata", "abundance_kind", "samples_in_rows", "rank_range", "prevalence", "total_count",
                "label_column", "conditional", "model_kind", "model", "train", "strategy", "beta", "cv", "diversity",
                "gradcheck", "simulate", "sweep", "out", "seed"},
               "config");
    const RunConfig d;
    c.abundance = j.value("abundance", d.abundance);
    c.metadata = j.value("metadata", d.metadata);
    const std::string kind = j.value("abundance_kind", std::string("relative"));
    if (kind != "relative" && kind != "counts")
        throw ConfigError("InvalidConfig", "abundance_kind must be 'relative' or 'counts'");
    c.abundance_kind = kind == "counts" ? AbundanceKind::counts : AbundanceKind::relative;
    c.samples_in_rows = j.value("samples_in_rows", d.samples_in_rows);
    c.rank_range.reset();
    if (j.contains("rank_range") && !j.at("rank_range").is_null()) {
        const auto r = j.at("rank_range").get<std::vector<int>>();
        if (r.size() != 2) throw ConfigError("InvalidConfig", "rank_range needs two entries");
        c.rank_range = std::make_pair(r[0], r[1]);
    }
    c.prevalence = j.value("prevalence", d.prevalence);
    c.total_count = j.value("total_count", d.total_count);
    c.label_column = j.value("label_column", d.label_column);
    c.conditional = j.value("conditional", d.conditional);
    c.model_kind = j.value("model_kind", d.model_kind);
    c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
    c.train = d.train;
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    c.strategy = j.value("strategy", d.strategy);
    c.beta = j.value("beta", d.beta);

    // the benchmark inherits the generative settings unless it sets its own
    json cv = j.value("cv", json::object());
    if (!cv.is_object()) throw ConfigError("InvalidConfig", "cv must be a JSON object");
    if (!cv.contains("model")) cv["model"] = c.model;
    if (!cv.contains("train")) cv["train"] = c.train;
    c.cv = cv.get<CvConfig>();

    const json div = j.value("diversity", json::object());
    check_keys(div, {"samples", "strategies", "pcoa_dims", "pseudocount"}, "diversity");
    c.diversity.samples = div.value("samples", d.diversity.samples);
    c.diversity.strategies = div.value("strategies", d.diversity.strategies);
    c.diversity.pcoa_dims = div.value("pcoa_dims", d.diversity.pcoa_dims);
    c.diversity.pseudocount = div.value("pseudocount", d.diversity.pseudocount);

    const json gc = j.value("gradcheck", json::object());
    check_keys(gc, {"probes", "step", "threshold", "rows", "total_count"}, "gradcheck");
    c.gradcheck.probes = gc.value("probes", d.gradcheck.probes);
    c.gradcheck.step = gc.value("step", d.gradcheck.step);
    c.gradcheck.threshold = gc.value("threshold", d.gradcheck.threshold);
    c.gradcheck.rows = gc.value("rows", d.gradcheck.rows);
    c.gradcheck.total_count = gc.value("total_count", d.gradcheck.total_count);

    const json sim = j.value("simulate", json::object());
    check_keys(sim, {"samples", "phyla", "genera_per_phylum", "species_per_genus", "rare_taxa", "rare_prevalence",
                     "top_mean", "effect"},
               "simulate");
    c.simulate.samples = sim.value("samples", d.simulate.samples);
    c.simulate.phyla = sim.value("phyla", d.simulate.phyla);
    c.simulate.genera_per_phylum = sim.value("genera_per_phylum", d.simulate.genera_per_phylum);
    c.simulate.species_per_genus = sim.value("species_per_genus", d.simulate.species_per_genus);
    c.simulate.rare_taxa = sim.value("rare_taxa", d.simulate.rare_taxa);
    c.simulate.rare_prevalence = sim.value("rare_prevalence", d.simulate.rare_prevalence);
    c.simulate.top_mean = sim.value("top_mean", d.simulate.top_mean);
    c.simulate.effect = sim.value("effect", d.simulate.effect);

    const json sw = j.value("sweep", json::object());
    check_keys(sw, {"betas", "fractions", "strategy", "classifier"}, "sweep");
    c.sweep.betas = sw.value("betas", d.sweep.betas);
    c.sweep.fractions = sw.value("fractions", d.sweep.fractions);
    c.sweep.strategy = sw.value("strategy", d.sweep.strategy);
    c.sweep.classifier = sw.value("classifier", d.sweep.classifier);

    c.out = j.value("out", d.out);
    c.seed = j.value("seed", d.seed);
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("UnreadableConfig", "cannot open " + path.string());
    RunConfig c;
    try {
        c = nlohmann::json::parse(in).get<RunConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("InvalidConfig", path.string() + ": " + e.what());
    }
    c.base_dir = path.parent_path();
    return c;
}

void validate(const RunConfig& c) {
    if (!(c.prevalence >= 0.0 && c.prevalence <= 1.0))
        throw ConfigError("InvalidThreshold", "prevalence must lie in [0, 1]");
    if (c.total_count < 1) throw ConfigError("InvalidCount", "total_count must be positive");
    if (c.rank_range && (c.rank_range->first < 1 || c.rank_range->second < c.rank_range->first))
        throw ConfigError("InvalidRankRange", "rank_range must be 1-based and ordered");
    if (c.model_kind != "plntree" && c.model_kind != "pln")
        throw ConfigError("UnknownModel", "model_kind must be 'plntree' or 'pln'");
    if (c.train.epochs < 0 || c.train.batch_size < 1 || c.train.mc_samples < 1 || !(c.train.learning_rate > 0.0))
        throw ConfigError("InvalidTraining", "epochs >= 0, batch_size >= 1, mc_samples >= 1 and lr > 0 are required");
    const auto& known = known_strategies();
    if (std::find(known.begin(), known.end(), c.strategy) == known.end())
        throw ConfigError("UnknownStrategy", "unknown strategy '" + c.strategy + "'");
    if (!(c.beta >= 1.0)) throw ConfigError("InvalidRatio", "beta must be >= 1");
    if (c.conditional && c.metadata.empty())
        throw ConfigError("MissingMetadata", "conditional models need a metadata file");
    validate(c.cv);
    if (c.diversity.samples < 1) throw ConfigError("InvalidCount", "diversity.samples must be positive");
    if (c.diversity.pcoa_dims < 1) throw ConfigError("InvalidDimension", "diversity.pcoa_dims must be positive");
    for (const auto& s : c.diversity.strategies)
        if (std::find(known.begin(), known.end(), s) == known.end() || s == "none")
            throw ConfigError("UnknownStrategy", "diversity strategy '" + s + "' is not a generator");
    if (c.gradcheck.probes < 1 || !(c.gradcheck.step > 0.0) || c.gradcheck.rows < 1 || c.gradcheck.total_count < 0)
        throw ConfigError("InvalidGradcheck", "gradcheck needs probes >= 1, step > 0, rows >= 1 and total_count >= 0");
    const auto& s = c.simulate;
    if (s.samples.size() < 2 || std::any_of(s.samples.begin(), s.samples.end(), [](int v) { return v < 1; }))
        throw ConfigError("InvalidSimulation", "simulate.samples needs at least two positive label sizes");
    if (s.phyla < 1 || s.genera_per_phylum < 1 || s.species_per_genus < 1 || s.rare_taxa < 0 ||
        !(s.rare_prevalence >= 0.0 && s.rare_prevalence <= 1.0))
        throw ConfigError("InvalidSimulation", "simulate tree sizes must be positive");
    for (double b : c.sweep.betas)
        if (!(b >= 1.0)) throw ConfigError("InvalidRatio", "sweep betas must be >= 1");
    for (double f : c.sweep.fractions)
        if (!(f > 0.0 && f <= 1.0)) throw ConfigError("InvalidFraction", "sweep fractions must lie in (0, 1]");
}

}  // namespace taxapln
