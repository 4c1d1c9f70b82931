#include "taxapln/cli.hpp"

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "taxapln/augment.hpp"
#include "taxapln/config.hpp"
#include "taxapln/error.hpp"
#include "taxapln/eval.hpp"
#include "taxapln/ingest.hpp"
#include "taxapln/metrics.hpp"
#include "taxapln/model.hpp"
#include "taxapln/simulate.hpp"

namespace taxapln {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Options {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    int jobs = 1;
    std::optional<double> beta;
    std::string strategy;
    std::optional<int> epochs;
    std::string checkpoints;
    bool corrupt = false;
};

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("UnwritableOutput", "cannot write " + path.string());
    f << content;
}

void write_json(const fs::path& path, const json& doc) { write_file(path, doc.dump(2) + "\n"); }

std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("UnreadableInput", "cannot open " + path.string());
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

/// Runs task(i) for i < count on at most `jobs` threads; the first failure is rethrown.
void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& task) {
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next++) < count;) {
            try {
                task(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const auto threads = std::min<std::size_t>(count, static_cast<std::size_t>(std::max(1, jobs)));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------

struct Run {
    RunConfig config;
    Options options;
    fs::path out;
};

Run prepare_run(const Options& o, bool needs_config) {
    Run run;
    run.options = o;
    if (!o.config.empty())
        run.config = load_run_config(o.config);
    else if (needs_config)
        throw ConfigError("MissingConfig", "--config is required for this subcommand");
    auto& c = run.config;
    if (o.seed) c.seed = *o.seed;
    if (o.beta) c.beta = c.cv.beta = *o.beta;
    if (!o.strategy.empty()) {
        c.strategy = o.strategy;
        c.cv.strategies = {"none", o.strategy};
        c.cv.reference = o.strategy;
        c.sweep.strategy = o.strategy;
    }
    if (o.epochs) c.train.epochs = c.cv.train.epochs = *o.epochs;
    if (o.jobs < 1) throw ConfigError("InvalidJobs", "--jobs must be >= 1");
    c.cv.seed = c.seed;
    // snapshots carry absolute input paths so they replay from anywhere
    if (!c.abundance.empty()) c.abundance = fs::absolute(c.abundance_path()).lexically_normal().string();
    if (!c.metadata.empty()) c.metadata = fs::absolute(c.metadata_path()).lexically_normal().string();
    c.base_dir.clear();
    validate(c);
    run.out = o.out.empty() ? fs::path(c.out) : fs::path(o.out);
    c.out = run.out.string();
    fs::create_directories(run.out);
    return run;
}

void snapshot(const Run& run) { write_json(run.out / "config.json", json(run.config)); }

Cohort load_cohort(const RunConfig& c) {
    if (c.abundance.empty()) throw ConfigError("MissingInput", "config names no abundance table");
    std::ifstream abundance(c.abundance_path());
    if (!abundance) throw DataError("UnreadableInput", "cannot open " + c.abundance_path().string());
    std::ifstream metadata;
    if (!c.metadata.empty()) {
        metadata.open(c.metadata_path());
        if (!metadata) throw DataError("UnreadableInput", "cannot open " + c.metadata_path().string());
    }
    Rng rng = make_rng(c.seed, "ingest");
    return prepare_cohort(abundance, c.metadata.empty() ? nullptr : &metadata, c.cohort_options(), rng);
}

/// Covariates of every cohort row, encoded with statistics of the whole cohort.
Matrix cohort_covariates(const Cohort& cohort, const RunConfig& c) {
    if (!cohort.metadata) throw ConfigError("MissingMetadata", "conditional models need sample metadata");
    const CovariateEncoder enc(c.cv.covariate_schema, *cohort.metadata);
    return enc.transform(*cohort.metadata).values;
}

std::vector<Eigen::Index> label_rows(const Cohort& cohort, int label) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < cohort.labels.size(); ++i)
        if (cohort.labels[i] == label) rows.push_back(static_cast<Eigen::Index>(i));
    return rows;
}

struct Family {
    std::string kind;
    bool conditional = false;
    std::string name() const { return kind + (conditional ? "+c" : ""); }
};

Family family_of(const std::string& strategy) {
    if (strategy == "pln") return {"pln", false};
    return {"plntree", strategy == "taxapln-c"};
}

struct LabelModels {
    Family family;
    std::vector<std::unique_ptr<Model>> models;  ///< per label
    std::vector<std::vector<double>> traces;

    std::vector<const Model*> view() const {
        std::vector<const Model*> v;
        for (const auto& m : models) v.push_back(m.get());
        return v;
    }
};

LabelModels fit_label_models(const Cohort& cohort, const Matrix& covariates, const Family& family, const RunConfig& c,
                             int jobs) {
    LabelModels out;
    out.family = family;
    const auto M = static_cast<std::size_t>(cohort.label_count());
    out.models.resize(M);
    out.traces.resize(M);
    parallel_for(M, jobs, [&](std::size_t label) {
        const auto rows = label_rows(cohort, static_cast<int>(label));
        if (rows.empty()) return;
        ModelConfig mc = c.model;
        mc.covariates = family.conditional ? static_cast<int>(covariates.cols()) : 0;
        TrainConfig tc = c.train;
        tc.seed = derive_seed(c.seed, "fit", {static_cast<std::uint64_t>(label), fnv1a(family.name())});
        const ModelData md = make_model_data(cohort.tree, cohort.counts(rows, Eigen::all),
                                             family.conditional ? Matrix(covariates(rows, Eigen::all)) : Matrix());
        auto fitted = fit_model(family.kind, cohort.tree, md, mc, tc);
        out.models[label] = std::move(fitted.model);
        out.traces[label] = std::move(fitted.result.elbo_trace);
    });
    return out;
}

std::string checkpoint_name(std::size_t label) { return "checkpoint_" + std::to_string(label) + ".json"; }

/// Reads checkpoint_<label>.json for every label and checks they belong to `family`.
LabelModels load_label_models(const fs::path& dir, const Cohort& cohort, const Family& family,
                              std::vector<std::string>& hashes) {
    LabelModels out;
    out.family = family;
    for (std::size_t label = 0; label < static_cast<std::size_t>(cohort.label_count()); ++label) {
        const fs::path path = dir / checkpoint_name(label);
        const std::string text = read_file(path);
        json doc;
        try {
            doc = json::parse(text);
        } catch (const json::exception& e) {
            throw DataError("BadCheckpoint", path.string() + ": " + e.what());
        }
        auto cp = load_checkpoint(doc);
        if (cp.label != cohort.label_names[label])
            throw DataError("CheckpointMismatch", path.string() + " holds label '" + cp.label + "', expected '" +
                                                      cohort.label_names[label] + "'");
        if (cp.model->kind() != family.kind || cp.model->conditional() != family.conditional)
            throw ConfigError("CheckpointMismatch", path.string() + " holds a " + cp.model->kind() +
                                                        (cp.model->conditional() ? "+c" : "") + " model, strategy needs " +
                                                        family.name());
        hashes.push_back(hex(fnv1a(text)));
        out.models.push_back(std::move(cp.model));
        out.traces.push_back(std::move(cp.trace));
    }
    return out;
}

LabeledData labeled(const Cohort& cohort, const Matrix& covariates) {
    LabeledData d;
    d.counts = cohort.counts;
    d.labels = cohort.labels;
    d.covariates = covariates;
    d.label_count = cohort.label_count();
    return d;
}

std::string format_double(double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_simulate(const Options& o, std::ostream& log) {
    Run run = prepare_run(o, false);
    const auto sim = simulate_cohort(run.config.simulate, run.config.seed);
    {
        std::ofstream f(run.out / "abundance.tsv", std::ios::binary);
        write_abundance_table(f, sim.table);
    }
    {
        std::ofstream f(run.out / "metadata.csv", std::ios::binary);
        write_metadata_csv(f, sim.metadata);
    }
    for (std::size_t c = 0; c < sim.truth.size(); ++c)
        write_json(run.out / ("truth_" + std::to_string(c) + ".json"),
                   checkpoint_json(*sim.truth[c], {}, std::to_string(c), TrainConfig{}));
    // a config that runs the other subcommands on the generated files
    RunConfig replay = run.config;
    replay.abundance = "abundance.tsv";
    replay.metadata = "metadata.csv";
    replay.out = "out";
    write_json(run.out / "config.json", json(replay));
    log << "simulated " << sim.table.values.rows() << " samples over " << sim.table.values.cols() << " taxa into "
        << run.out.string() << "\n";
    return 0;
}

int cmd_fit(const Options& o, std::ostream& log) {
    Run run = prepare_run(o, true);
    const auto& c = run.config;
    const Cohort cohort = load_cohort(c);
    const Matrix cov = c.conditional ? cohort_covariates(cohort, c) : Matrix();
    const Family family{c.model_kind, c.conditional};
    const auto fitted = fit_label_models(cohort, cov, family, c, run.options.jobs);

    std::ostringstream trace;
    trace << "label,epoch,elbo\n";
    json models = json::array();
    for (std::size_t label = 0; label < fitted.models.size(); ++label) {
        const auto& name = cohort.label_names[label];
        if (!fitted.models[label]) throw DataError("EmptyLabel", "label '" + name + "' has no samples");
        const std::string text = checkpoint_json(*fitted.models[label], fitted.traces[label], name, c.train).dump() + "\n";
        write_file(run.out / checkpoint_name(label), text);
        for (std::size_t e = 0; e < fitted.traces[label].size(); ++e)
            trace << name << ',' << e << ',' << format_double(fitted.traces[label][e]) << '\n';
        models.push_back({{"label", name},
                          {"file", checkpoint_name(label)},
                          {"hash", hex(fnv1a(text))},
                          {"samples", label_rows(cohort, static_cast<int>(label)).size()},
                          {"final_elbo", fitted.traces[label].empty() ? json(nullptr) : json(fitted.traces[label].back())}});
    }
    write_file(run.out / "trace.csv", trace.str());
    write_json(run.out / "fit_manifest.json", {{"model_kind", family.kind},
                                               {"conditional", family.conditional},
                                               {"epochs", c.train.epochs},
                                               {"seed", c.seed},
                                               {"taxa", cohort.tree.leaf_count()},
                                               {"samples", cohort.size()},
                                               {"models", models}});
    snapshot(run);
    log << "fitted " << models.size() << " " << family.name() << " models into " << run.out.string() << "\n";
    return 0;
}

int cmd_augment(const Options& o, std::ostream& log) {
    Run run = prepare_run(o, true);
    const auto& c = run.config;
    const Cohort cohort = load_cohort(c);
    const bool model_based = is_model_strategy(c.strategy);
    const Family family = family_of(c.strategy);
    const Matrix cov = model_based && family.conditional ? cohort_covariates(cohort, c) : Matrix();

    LabelModels models;
    std::vector<std::string> hashes;
    if (model_based) {
        if (!run.options.checkpoints.empty()) {
            models = load_label_models(run.options.checkpoints, cohort, family, hashes);
        } else {
            models = fit_label_models(cohort, cov, family, c, run.options.jobs);
            for (std::size_t label = 0; label < models.models.size(); ++label) {
                if (!models.models[label]) continue;
                const std::string text =
                    checkpoint_json(*models.models[label], models.traces[label], cohort.label_names[label], c.train).dump() + "\n";
                write_file(run.out / checkpoint_name(label), text);
                hashes.push_back(hex(fnv1a(text)));
            }
        }
    }

    const std::uint64_t seed = derive_seed(c.seed, "augment");
    const auto aug = augment_dataset(labeled(cohort, cov), cohort.tree, c.strategy, c.beta, seed, models.view(), c.cv.augment);

    std::ostringstream tsv;
    tsv << "row\tsample_id\tlabel\tsource";
    if (c.cv.augment.cross_label)
        for (const auto& name : cohort.label_names) tsv << "\tweight_" << name;
    for (const auto& t : cohort.tree.leaf_lineages()) tsv << '\t' << t;
    tsv << '\n';
    for (Eigen::Index i = 0; i < aug.counts.rows(); ++i) {
        const auto si = static_cast<std::size_t>(i);
        tsv << i << '\t' << (i < aug.original_rows ? cohort.sample_ids[si] : "synthetic_" + std::to_string(i - aug.original_rows))
            << '\t' << cohort.label_names[static_cast<std::size_t>(aug.labels[si])] << '\t' << aug.provenance[si].source;
        if (c.cv.augment.cross_label)
            for (Eigen::Index k = 0; k < aug.soft_labels.cols(); ++k) tsv << '\t' << format_double(aug.soft_labels(i, k));
        for (Eigen::Index j = 0; j < aug.counts.cols(); ++j) tsv << '\t' << aug.counts(i, j);
        tsv << '\n';
    }
    write_file(run.out / "augmented.tsv", tsv.str());

    std::ostringstream prov;
    write_provenance_csv(prov, aug);
    write_file(run.out / "provenance.csv", prov.str());

    const auto per_label = synthetic_label_counts(cohort.labels, cohort.label_count(), c.beta);
    json split = json::object();
    for (std::size_t k = 0; k < per_label.size(); ++k) split[cohort.label_names[k]] = per_label[k];
    json model_list = json::array();
    for (std::size_t k = 0; k < hashes.size(); ++k)
        model_list.push_back({{"label", cohort.label_names[k]}, {"family", family.name()}, {"hash", hashes[k]}});
    write_json(run.out / "manifest.json", {{"strategy", c.strategy},
                                           {"beta", c.beta},
                                           {"seed", c.seed},
                                           {"augment_seed", seed},
                                           {"original_rows", aug.original_rows},
                                           {"synthetic_rows", aug.synthetic_rows()},
                                           {"synthetic_per_label", split},
                                           {"models", model_list},
                                           {"files", {"augmented.tsv", "provenance.csv"}}});
    snapshot(run);
    log << "augmented " << aug.original_rows << " rows with " << aug.synthetic_rows() << " " << c.strategy
        << " rows into " << run.out.string() << "\n";
    return 0;
}

int cmd_diversity(const Options& o, std::ostream& log) {
    Run run = prepare_run(o, true);
    const auto& c = run.config;
    const Cohort cohort = load_cohort(c);
    const auto& strategies = c.diversity.strategies;
    const bool any_conditional = std::find(strategies.begin(), strategies.end(), "taxapln-c") != strategies.end();
    const Matrix cov = any_conditional ? cohort_covariates(cohort, c) : Matrix();
    const LabeledData data = labeled(cohort, cov);
    const double beta = 1.0 + static_cast<double>(c.diversity.samples) / static_cast<double>(cohort.size());

    std::map<std::string, LabelModels> cache;
    std::vector<std::pair<std::string, CountMatrix>> synthetic;
    for (const auto& s : strategies) {
        std::vector<const Model*> view;
        if (is_model_strategy(s)) {
            const Family f = family_of(s);
            auto it = cache.find(f.name());
            if (it == cache.end()) {
                LabelModels m;
                if (!run.options.checkpoints.empty() && f.kind == c.model_kind && f.conditional == c.conditional) {
                    std::vector<std::string> hashes;
                    m = load_label_models(run.options.checkpoints, cohort, f, hashes);
                } else {
                    m = fit_label_models(cohort, cov, f, c, run.options.jobs);
                }
                it = cache.emplace(f.name(), std::move(m)).first;
            }
            view = it->second.view();
        }
        const auto aug = augment_dataset(data, cohort.tree, s, beta, derive_seed(c.seed, "diversity", {fnv1a(s)}), view,
                                         c.cv.augment);
        synthetic.emplace_back(s, CountMatrix(aug.counts.bottomRows(aug.synthetic_rows())));
        log << "generated " << aug.synthetic_rows() << " " << s << " samples\n";
    }
    const auto report = diversity_report(cohort.counts, synthetic, c.diversity.pcoa_dims, c.diversity.pseudocount);
    write_diversity_report(report, run.out.string());
    snapshot(run);
    return 0;
}

void write_benchmark(const Run& run, const BenchmarkResult& result, std::ostream& log) {
    std::ostringstream csv;
    write_results_csv(csv, result);
    write_file(run.out / "results.csv", csv.str());
    const auto report = benchmark_report(result, run.config.cv.reference);
    write_json(run.out / "report.json", report.to_json());
    for (const auto& cl : report.classifiers)
        for (const auto& s : cl.strategies)
            log << cl.classifier << " " << s.strategy << " auprc " << s.mean << " +- " << 1.96 * s.se
                << (s.tested ? "  [" + s.compared_to + " > " + s.strategy + ": p=" + std::to_string(s.test.p_value) + " " +
                                   s.stars + "]"
                             : std::string())
                << "\n";
}

int cmd_benchmark(const Options& o, std::ostream& log) {
    Run run = prepare_run(o, true);
    CvConfig cv = run.config.cv;
    cv.jobs = run.options.jobs;  // thread count never reaches the outputs, so the snapshot keeps the file's value
    if (!cv.export_dir.empty() && fs::path(cv.export_dir).is_relative()) cv.export_dir = (run.out / cv.export_dir).string();
    const Cohort cohort = load_cohort(run.config);
    const auto result = cross_validate(cohort, cv);
    write_benchmark(run, result, log);
    snapshot(run);
    return 0;
}

int cmd_beta_sweep(const Options& o, std::ostream& log) {
    Run run = prepare_run(o, true);
    const Cohort cohort = load_cohort(run.config);
    CvConfig cv = run.config.cv;
    cv.jobs = run.options.jobs;
    const auto rows = beta_sweep(cohort, cv, run.config.sweep.betas);
    std::ostringstream csv;
    write_curve_csv(csv, rows, "beta");
    write_file(run.out / "beta_sweep.csv", csv.str());
    snapshot(run);
    log << "wrote " << rows.size() << " beta-sweep rows\n";
    return 0;
}

int cmd_subsample(const Options& o, std::ostream& log) {
    Run run = prepare_run(o, true);
    const Cohort cohort = load_cohort(run.config);
    const auto& sw = run.config.sweep;
    CvConfig cv = run.config.cv;
    cv.jobs = run.options.jobs;
    const auto rows = subsample_study(cohort, cv, sw.fractions, sw.strategy, sw.classifier);
    std::ostringstream csv;
    write_curve_csv(csv, rows, "fraction");
    write_file(run.out / "subsample.csv", csv.str());
    snapshot(run);
    log << "wrote " << rows.size() << " subsample rows\n";
    return 0;
}

int cmd_gradcheck(const Options& o, std::ostream& log) {
    Run run = prepare_run(o, true);
    const auto& c = run.config;
    const auto& g = c.gradcheck;
    const Cohort cohort = load_cohort(c);
    const Eigen::Index rows = std::min<Eigen::Index>(g.rows, cohort.size());
    std::vector<Eigen::Index> picked;
    for (Eigen::Index i = 0; i < rows; ++i) picked.push_back(i);
    const Matrix cov = c.conditional ? Matrix(cohort_covariates(cohort, c)(picked, Eigen::all)) : Matrix();
    ModelConfig mc = c.model;
    mc.covariates = c.conditional ? static_cast<int>(cov.cols()) : 0;
    CountMatrix counts = cohort.counts(picked, Eigen::all);
    if (g.total_count > 0) {
        Rng depth_rng = make_rng(c.seed, "gradcheck-depth");
        for (Eigen::Index i = 0; i < counts.rows(); ++i)
            counts.row(i) = multinomial(g.total_count, counts.row(i).cast<double>().transpose(), depth_rng).transpose();
    }
    const ModelData data = make_model_data(cohort.tree, counts, cov);
    auto model = make_model(c.model_kind, cohort.tree, mc, derive_seed(c.seed, "init"));
    model->initialize_from_data(data);
    Rng rng = make_rng(c.seed, "gradcheck");
    if (c.conditional)  // move the FiLM heads off their identity start so they are exercised
        for (auto* p : model->parameters())
            if (p->name.find("film") != std::string::npos)
                p->value = 0.3 * standard_normal(p->value.rows(), p->value.cols(), rng);
    const auto noise = model->draw_noise(rows, rng);
    const auto r = ad::finite_difference_check([&](ad::Tape& t) { return model->elbo(t, data, noise); },
                                               model->parameters(), g.probes, g.step, rng, run.options.corrupt);
    const bool passed = r.max_relative_error < g.threshold;
    write_json(run.out / "gradcheck.json", {{"max_relative_error", r.max_relative_error},
                                            {"threshold", g.threshold},
                                            {"passed", passed},
                                            {"probes", r.probes},
                                            {"step", g.step},
                                            {"rows", rows},
                                            {"total_count", g.total_count},
                                            {"corrupt", run.options.corrupt},
                                            {"worst_parameter", r.worst_parameter},
                                            {"worst_row", r.worst_row},
                                            {"worst_col", r.worst_col},
                                            {"analytic", r.analytic},
                                            {"numeric", r.numeric}});
    snapshot(run);
    log << "max relative error " << r.max_relative_error << " over " << r.probes << " probes\n";
    if (!passed)
        throw NumericError("GradientMismatch", "max relative error " + format_double(r.max_relative_error) +
                                                   " is above the threshold " + format_double(g.threshold));
    return 0;
}

int exit_code(Error::Category c) {
    switch (c) {
        case Error::Category::config: return 2;
        case Error::Category::data: return 3;
        case Error::Category::numeric: return 4;
    }
    return 1;
}

void report_error(std::ostream& err, const std::string& category, const std::string& code, const std::string& message,
                  const std::string& command) {
    err << json{{"error", {{"category", category}, {"code", code}, {"message", message}, {"command", command}}}}.dump()
        << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Taxonomy-aware PLN-Tree augmentation of microbiome counts", "taxapln"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    std::uint64_t seed = 0;
    double beta = 0.0;
    int epochs = 0;
    app.add_option("--config", o.config, "run configuration (JSON)");
    app.add_option("--out", o.out, "output directory (overrides the config)");
    auto* seed_opt = app.add_option("--seed", seed, "master seed");
    app.add_option("--jobs", o.jobs, "parallel work units");
    auto* beta_opt = app.add_option("--beta", beta, "augmentation ratio");
    app.add_option("--strategy", o.strategy, "augmentation strategy");
    auto* epochs_opt = app.add_option("--epochs", epochs, "generative-model epochs");

    std::map<std::string, std::function<int(const Options&, std::ostream&)>> commands{
        {"simulate", cmd_simulate}, {"fit", cmd_fit},           {"augment", cmd_augment},
        {"diversity", cmd_diversity}, {"benchmark", cmd_benchmark}, {"beta-sweep", cmd_beta_sweep},
        {"subsample", cmd_subsample}, {"gradcheck", cmd_gradcheck}};
    const std::map<std::string, std::string> help{
        {"simulate", "write a synthetic cohort drawn from known PLN-Trees"},
        {"fit", "fit one model per label and write checkpoints"},
        {"augment", "augment the cohort with the configured strategy"},
        {"diversity", "compare alpha and beta diversity of generated samples"},
        {"benchmark", "repeated stratified cross-validation of the strategies"},
        {"beta-sweep", "benchmark across augmentation ratios"},
        {"subsample", "raw vs augmented AUPRC on subsampled training folds"},
        {"gradcheck", "finite-difference check of the ELBO gradient"}};
    for (const auto& [name, text] : help) {
        auto* sub = app.add_subcommand(name, text);
        if (name == "augment" || name == "diversity")
            sub->add_option("--checkpoints", o.checkpoints, "directory of fitted checkpoints");
        if (name == "gradcheck") sub->add_flag("--corrupt", o.corrupt, "perturb the backward pass (negative control)");
    }

    std::string command = "taxapln";
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            std::ostringstream s;
            app.exit(e, s, s);
            out << s.str();
            return 0;
        }
        report_error(err, "config", "BadArguments", e.what(), command);
        return 2;
    }
    if (seed_opt->count()) o.seed = seed;
    if (beta_opt->count()) o.beta = beta;
    if (epochs_opt->count()) o.epochs = epochs;
    command = app.get_subcommands().front()->get_name();

    try {
        return commands.at(command)(o, out);
    } catch (const Error& e) {
        const char* cat = e.category() == Error::Category::config ? "config"
                          : e.category() == Error::Category::data ? "data"
                                                                  : "numeric";
        report_error(err, cat, e.code(), e.what(), command);
        return exit_code(e.category());
    } catch (const fs::filesystem_error& e) {
        report_error(err, "data", "FilesystemError", e.what(), command);
        return 3;
    } catch (const std::exception& e) {
        report_error(err, "numeric", "InternalError", e.what(), command);
        return 4;
    }
}

}  // namespace taxapln
