#include "taxapln/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "taxapln/error.hpp"

namespace taxapln {

namespace {

double log1pexp(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

void check_xy(const Eigen::MatrixXd& x, const std::vector<int>& y) {
    if (static_cast<Eigen::Index>(y.size()) != x.rows()) throw DataError("LengthMismatch", "one label per row is required");
    if (x.rows() == 0) throw DataError("EmptyInput", "no training rows");
    if (!x.allFinite()) throw NumericError("NonFinite", "features contain non-finite values");
}

}  // namespace

// ---------------------------------------------------------------------------
// Logistic regression

double logistic_objective(const Eigen::MatrixXd& x, const std::vector<int>& y, const Eigen::VectorXd& w, double b,
                          double c) {
    const Eigen::VectorXd z = (x * w).array() + b;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) loss += log1pexp(z(i)) - y[static_cast<std::size_t>(i)] * z(i);
    return loss / static_cast<double>(x.rows()) + w.squaredNorm() / (2.0 * c);
}

Eigen::VectorXd logistic_gradient(const Eigen::MatrixXd& x, const std::vector<int>& y, const Eigen::VectorXd& w,
                                  double b, double c) {
    const Eigen::Index n = x.rows(), d = x.cols();
    Eigen::VectorXd r = (x * w).array() + b;
    for (Eigen::Index i = 0; i < n; ++i) r(i) = sigmoid(r(i)) - y[static_cast<std::size_t>(i)];
    Eigen::VectorXd g(d + 1);
    g.head(d) = x.transpose() * r / static_cast<double>(n) + w / c;
    g(d) = r.sum() / static_cast<double>(n);
    return g;
}

LogisticRegression LogisticRegression::fit(const Eigen::MatrixXd& x, const std::vector<int>& y, double c,
                                           int max_iter, double tol) {
    check_xy(x, y);
    if (!(c > 0)) throw ConfigError("InvalidPenalty", "C must be positive");
    for (int v : y)
        if (v != 0 && v != 1) throw DataError("NonBinaryLabel", "logistic regression takes labels 0/1");
    if (std::all_of(y.begin(), y.end(), [&](int v) { return v == y.front(); }))
        throw DataError("SingleClass", "training labels contain one class only");
    const Eigen::Index n = x.rows(), d = x.cols();
    LogisticRegression m;
    m.weights = Eigen::VectorXd::Zero(d);
    double f = logistic_objective(x, y, m.weights, m.bias, c);
    for (m.iterations = 0; m.iterations < max_iter; ++m.iterations) {
        const Eigen::VectorXd g = logistic_gradient(x, y, m.weights, m.bias, c);
        m.gradient_norm = g.norm();
        if (m.gradient_norm < tol) break;
        Eigen::VectorXd s = (x * m.weights).array() + m.bias;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double p = sigmoid(s(i));
            s(i) = p * (1 - p) / static_cast<double>(n);
        }
        Eigen::MatrixXd h(d + 1, d + 1);
        h.topLeftCorner(d, d) = x.transpose() * s.asDiagonal() * x;
        h.topLeftCorner(d, d).diagonal().array() += 1.0 / c;
        h.topRightCorner(d, 1) = x.transpose() * s;
        h.bottomLeftCorner(1, d) = h.topRightCorner(d, 1).transpose();
        h(d, d) = s.sum() + 1e-12;
        const Eigen::VectorXd step = h.ldlt().solve(g);
        double t = 1.0, f_new = f;
        Eigen::VectorXd w_new;
        double b_new = m.bias;
        for (int half = 0; half < 40; ++half, t *= 0.5) {
            w_new = m.weights - t * step.head(d);
            b_new = m.bias - t * step(d);
            f_new = logistic_objective(x, y, w_new, b_new, c);
            if (f_new <= f - 1e-4 * t * g.dot(step)) break;
        }
        if (!(f_new <= f)) break;  // no descent left at machine precision
        m.weights = w_new;
        m.bias = b_new;
        f = f_new;
    }
    m.gradient_norm = logistic_gradient(x, y, m.weights, m.bias, c).norm();
    return m;
}

Eigen::VectorXd LogisticRegression::predict(const Eigen::MatrixXd& x) const {
    Eigen::VectorXd z = (x * weights).array() + bias;
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = sigmoid(z(i));
    return z;
}

// ---------------------------------------------------------------------------
// MLP

void to_json(nlohmann::json& j, const MlpConfig& c) {
    j = {{"hidden", c.hidden},         {"max_iter", c.max_iter},
         {"learning_rate", c.learning_rate}, {"alpha", c.alpha},
         {"batch_size", c.batch_size}, {"tol", c.tol},
         {"n_iter_no_change", c.n_iter_no_change}};
}

void from_json(const nlohmann::json& j, MlpConfig& c) {
    MlpConfig d;
    c.hidden = j.value("hidden", d.hidden);
    c.max_iter = j.value("max_iter", d.max_iter);
    c.learning_rate = j.value("learning_rate", d.learning_rate);
    c.alpha = j.value("alpha", d.alpha);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.tol = j.value("tol", d.tol);
    c.n_iter_no_change = j.value("n_iter_no_change", d.n_iter_no_change);
}

namespace {

/// Softmax rows in place.
void softmax_rows(Eigen::MatrixXd& z) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double m = z.row(i).maxCoeff();
        z.row(i) = (z.row(i).array() - m).exp();
        z.row(i) /= z.row(i).sum();
    }
}

}  // namespace

Mlp Mlp::fit(const Eigen::MatrixXd& x, const std::vector<int>& y, int classes, const MlpConfig& config,
             std::uint64_t seed) {
    check_xy(x, y);
    if (classes < 2) throw ConfigError("InvalidClasses", "need at least two classes");
    if (std::all_of(y.begin(), y.end(), [&](int v) { return v == y.front(); }))
        throw DataError("SingleClass", "training labels contain one class only");
    Mlp m;
    m.classes = classes;
    Rng rng = make_rng(seed, "mlp");
    std::vector<int> sizes{static_cast<int>(x.cols())};
    sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
    sizes.push_back(classes);
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        nn::Dense layer("mlp." + std::to_string(l), sizes[l], sizes[l + 1], rng);
        m.weights.push_back(layer.weight);
        m.biases.push_back(layer.bias);
    }
    ad::ParameterRefs params;
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        params.push_back(&m.weights[l]);
        params.push_back(&m.biases[l]);
    }
    ad::AdamState adam;
    adam.learning_rate = config.learning_rate;

    const Eigen::Index n = x.rows();
    const Eigen::Index batch = std::clamp<Eigen::Index>(config.batch_size, 1, n);
    const std::size_t L = m.weights.size();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    double best = INFINITY;
    int stall = 0;
    std::vector<Eigen::MatrixXd> act(L + 1), pre(L);
    for (int epoch = 0; epoch < config.max_iter; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (Eigen::Index start = 0; start < n; start += batch) {
            const Eigen::Index nb = std::min(batch, n - start);
            const std::vector<Eigen::Index> rows(order.begin() + start, order.begin() + start + nb);
            act[0] = x(rows, Eigen::all);
            for (std::size_t l = 0; l < L; ++l) {
                pre[l] = (act[l] * m.weights[l].value).rowwise() + m.biases[l].value.row(0);
                act[l + 1] = l + 1 < L ? Eigen::MatrixXd(pre[l].cwiseMax(0.0)) : pre[l];
            }
            Eigen::MatrixXd prob = act[L];
            softmax_rows(prob);
            double loss = 0.0, penalty = 0.0;
            Eigen::MatrixXd delta = prob;
            for (Eigen::Index i = 0; i < nb; ++i) {
                const int yi = y[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])];
                loss -= std::log(std::max(prob(i, yi), 1e-300));
                delta(i, yi) -= 1.0;
            }
            for (const auto& w : m.weights) penalty += w.value.squaredNorm();
            const double nbd = static_cast<double>(nb);
            loss = loss / nbd + 0.5 * config.alpha * penalty / nbd;
            delta /= nbd;
            for (std::size_t l = L; l-- > 0;) {
                m.weights[l].grad = act[l].transpose() * delta + (config.alpha / nbd) * m.weights[l].value;
                m.biases[l].grad = delta.colwise().sum();
                if (l > 0) {
                    delta = delta * m.weights[l].value.transpose();
                    delta = (pre[l - 1].array() > 0.0).select(delta, 0.0);
                }
            }
            ad::adam_step(params, adam);
            epoch_loss += loss * nbd;
        }
        epoch_loss /= static_cast<double>(n);
        if (!std::isfinite(epoch_loss)) throw NumericError("NonFiniteLoss", "MLP loss diverged");
        m.loss_trace.push_back(epoch_loss);
        if (config.n_iter_no_change > 0) {
            stall = epoch_loss > best - config.tol ? stall + 1 : 0;
            best = std::min(best, epoch_loss);
            if (stall >= config.n_iter_no_change) break;
        }
    }
    return m;
}

Eigen::MatrixXd Mlp::predict_proba(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd a = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        Eigen::MatrixXd z = (a * weights[l].value).rowwise() + biases[l].value.row(0);
        a = l + 1 < weights.size() ? Eigen::MatrixXd(z.cwiseMax(0.0)) : z;
    }
    softmax_rows(a);
    return a;
}

// ---------------------------------------------------------------------------
// Folds

std::vector<int> stratified_folds(const std::vector<int>& labels, int folds, Rng& rng) {
    if (folds < 2) throw ConfigError("InvalidFolds", "at least two folds are required");
    const int M = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<int> out(labels.size(), -1);
    std::size_t t = 0;
    for (int c = 0; c < M; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == c) members.push_back(i);
        std::shuffle(members.begin(), members.end(), rng);
        // continuing the deal across labels keeps fold sizes balanced as well
        for (auto i : members) out[i] = static_cast<int>(t++ % static_cast<std::size_t>(folds));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Config serialisation

namespace {

const char* encoding_name(CovariateEncoding e) {
    switch (e) {
        case CovariateEncoding::ordinal: return "ordinal";
        case CovariateEncoding::binary: return "binary";
        case CovariateEncoding::minmax: return "minmax";
        case CovariateEncoding::onehot: return "onehot";
    }
    return "minmax";
}

CovariateEncoding encoding_from(const std::string& s) {
    if (s == "ordinal") return CovariateEncoding::ordinal;
    if (s == "binary") return CovariateEncoding::binary;
    if (s == "minmax") return CovariateEncoding::minmax;
    if (s == "onehot") return CovariateEncoding::onehot;
    throw ConfigError("UnknownEncoding", "unknown covariate encoding '" + s + "'");
}

}  // namespace

void to_json(nlohmann::json& j, const CvConfig& c) {
    nlohmann::json schema = nlohmann::json::array();
    for (const auto& f : c.covariate_schema)
        schema.push_back({{"name", f.name}, {"encoding", encoding_name(f.encoding)}, {"categories", f.categories}});
    j = {{"folds", c.folds},
         {"repeats", c.repeats},
         {"seed", c.seed},
         {"beta", c.beta},
         {"strategies", c.strategies},
         {"preprocessing", c.preprocessing},
         {"classifiers", c.classifiers},
         {"reference", c.reference},
         {"train_fraction", c.train_fraction},
         {"clr_pseudocount", c.clr_pseudocount},
         {"logreg_c", c.logreg_c},
         {"mlp", c.mlp},
         {"model", c.model},
         {"train", c.train},
         {"augment",
          {{"total_count", c.augment.total_count},
           {"mix_alpha", c.augment.mix_alpha},
           {"mix_beta", c.augment.mix_beta},
           {"cross_label", c.augment.cross_label}}},
         {"covariate_schema", schema},
         {"jobs", c.jobs},
         {"export_dir", c.export_dir}};
}

void from_json(const nlohmann::json& j, CvConfig& c) {
    const CvConfig d;
    c.folds = j.value("folds", d.folds);
    c.repeats = j.value("repeats", d.repeats);
    c.seed = j.value("seed", d.seed);
    c.beta = j.value("beta", d.beta);
    c.strategies = j.value("strategies", d.strategies);
    c.preprocessing = j.value("preprocessing", d.preprocessing);
    c.classifiers = j.value("classifiers", d.classifiers);
    c.reference = j.value("reference", d.reference);
    c.train_fraction = j.value("train_fraction", d.train_fraction);
    c.clr_pseudocount = j.value("clr_pseudocount", d.clr_pseudocount);
    c.logreg_c = j.value("logreg_c", d.logreg_c);
    c.mlp = j.contains("mlp") ? j.at("mlp").get<MlpConfig>() : d.mlp;
    c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
    c.train = d.train;
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    c.augment = d.augment;
    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        c.augment.total_count = a.value("total_count", d.augment.total_count);
        c.augment.mix_alpha = a.value("mix_alpha", d.augment.mix_alpha);
        c.augment.mix_beta = a.value("mix_beta", d.augment.mix_beta);
        c.augment.cross_label = a.value("cross_label", d.augment.cross_label);
    }
    c.covariate_schema = d.covariate_schema;
    if (j.contains("covariate_schema")) {
        c.covariate_schema.clear();
        for (const auto& f : j.at("covariate_schema"))
            c.covariate_schema.push_back({f.at("name").get<std::string>(),
                                          encoding_from(f.at("encoding").get<std::string>()),
                                          f.value("categories", std::vector<std::string>{})});
    }
    c.jobs = j.value("jobs", d.jobs);
    c.export_dir = j.value("export_dir", d.export_dir);
}

void validate(const CvConfig& c) {
    if (c.folds < 2) throw ConfigError("InvalidFolds", "folds must be >= 2");
    if (c.repeats < 1) throw ConfigError("InvalidRepeats", "repeats must be >= 1");
    if (!(c.beta >= 1.0)) throw ConfigError("InvalidRatio", "beta must be >= 1");
    if (!(c.train_fraction > 0.0 && c.train_fraction <= 1.0))
        throw ConfigError("InvalidFraction", "train fraction must lie in (0, 1]");
    if (c.preprocessing != "clr" && c.preprocessing != "proportions")
        throw ConfigError("UnknownPreprocessing", "preprocessing must be clr or proportions");
    for (const auto& s : c.strategies)
        if (std::find(known_strategies().begin(), known_strategies().end(), s) == known_strategies().end())
            throw ConfigError("UnknownStrategy", "unknown strategy '" + s + "'");
    for (const auto& k : c.classifiers)
        if (k != "logreg" && k != "mlp") throw ConfigError("UnknownClassifier", "unknown classifier '" + k + "'");
    if (c.classifiers.empty()) throw ConfigError("NoClassifiers", "at least one classifier is required");
    if (c.jobs < 1) throw ConfigError("InvalidJobs", "jobs must be >= 1");
}

// ---------------------------------------------------------------------------
// Cross-validation

std::vector<double> BenchmarkResult::repeat_means(std::size_t ci, std::size_t si) const {
    std::vector<double> out;
    for (const auto& folds_r : fold_auprc.at(ci).at(si))
        out.push_back(std::accumulate(folds_r.begin(), folds_r.end(), 0.0) / static_cast<double>(folds_r.size()));
    return out;
}

std::size_t BenchmarkResult::strategy_index(const std::string& name) const {
    const auto it = std::find(strategies.begin(), strategies.end(), name);
    if (it == strategies.end()) throw ConfigError("UnknownStrategy", "strategy '" + name + "' not in the result");
    return static_cast<std::size_t>(it - strategies.begin());
}

std::size_t BenchmarkResult::classifier_index(const std::string& name) const {
    const auto it = std::find(classifiers.begin(), classifiers.end(), name);
    if (it == classifiers.end()) throw ConfigError("UnknownClassifier", "classifier '" + name + "' not in the result");
    return static_cast<std::size_t>(it - classifiers.begin());
}

namespace {

std::vector<std::string> strategy_list(const std::vector<std::string>& requested) {
    std::vector<std::string> out{"none"};
    for (const auto& s : requested)
        if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
    return out;
}

/// Generative model family behind a strategy: kind plus whether it is conditioned.
std::pair<std::string, bool> model_family(const std::string& strategy) {
    if (strategy == "pln") return {"pln", false};
    return {"plntree", strategy == "taxapln-c"};
}

Eigen::MatrixXd features(const CountMatrix& counts, const CvConfig& config) {
    if (config.preprocessing == "clr") return clr_transform(counts, config.clr_pseudocount);
    return safe_proportions(counts.cast<double>());
}

void write_counts_tsv(const std::filesystem::path& path, const CountMatrix& counts, const std::vector<int>& labels,
                      const std::vector<std::string>& sources, const std::vector<std::string>& taxa) {
    std::ofstream out(path);
    out << "row\tlabel\tsource";
    for (const auto& t : taxa) out << '\t' << t;
    out << "\n";
    for (Eigen::Index i = 0; i < counts.rows(); ++i) {
        out << i << '\t' << labels[static_cast<std::size_t>(i)] << '\t' << sources[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < counts.cols(); ++j) out << '\t' << counts(i, j);
        out << "\n";
    }
}

struct UnitOutput {
    /// [classifier][strategy]
    std::vector<std::vector<double>> auprc;
    std::vector<std::string> exported;
};

UnitOutput run_unit(const Cohort& cohort, const CvConfig& config, const std::vector<std::string>& strategies,
                    const std::vector<int>& fold_of, int repeat, int fold) {
    const auto n = static_cast<std::size_t>(cohort.size());
    const int M = cohort.label_count();
    const auto r = static_cast<std::uint64_t>(repeat), f = static_cast<std::uint64_t>(fold);

    std::vector<std::size_t> train, test;
    for (std::size_t i = 0; i < n; ++i) (fold_of[i] == fold ? test : train).push_back(i);

    if (config.train_fraction < 1.0) {
        Rng rng = make_rng(config.seed, "subsample", {r, f});
        std::vector<std::size_t> kept;
        for (int c = 0; c < M; ++c) {
            std::vector<std::size_t> members;
            for (auto i : train)
                if (cohort.labels[i] == c) members.push_back(i);
            const auto full = static_cast<double>(std::count(cohort.labels.begin(), cohort.labels.end(), c));
            const auto keep = std::min<std::size_t>(members.size(), static_cast<std::size_t>(std::llround(config.train_fraction * full)));
            if (keep < 1)
                throw DataError("FractionTooSmall", "fraction " + std::to_string(config.train_fraction) +
                                                        " leaves no training sample for label " + cohort.label_names[static_cast<std::size_t>(c)]);
            std::shuffle(members.begin(), members.end(), rng);
            kept.insert(kept.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(keep));
        }
        std::sort(kept.begin(), kept.end());
        train = kept;
    }

    std::vector<Eigen::Index> train_rows(train.begin(), train.end()), test_rows(test.begin(), test.end());
    LabeledData data;
    data.counts = cohort.counts(train_rows, Eigen::all);
    data.label_count = M;
    for (auto i : train) data.labels.push_back(cohort.labels[i]);
    const bool needs_cov = std::find(strategies.begin(), strategies.end(), "taxapln-c") != strategies.end();
    if (needs_cov) {
        if (!cohort.metadata) throw ConfigError("MissingMetadata", "conditional strategy needs sample metadata");
        const MetadataTable meta = cohort.metadata->select(train);
        // min-max statistics come from the training fold only
        const CovariateEncoder enc(config.covariate_schema, meta);
        data.covariates = enc.transform(meta).values;
    }
    std::vector<int> test_labels;
    for (auto i : test) test_labels.push_back(cohort.labels[i]);
    const Eigen::MatrixXd test_x = features(cohort.counts(test_rows, Eigen::all), config);

    const auto per_label = synthetic_label_counts(data.labels, M, config.beta);
    const bool any_synthetic = std::accumulate(per_label.begin(), per_label.end(), Eigen::Index{0}) > 0;

    std::map<std::pair<std::string, bool>, std::vector<std::unique_ptr<Model>>> models;
    auto models_for = [&](const std::string& strategy) {
        const auto family = model_family(strategy);
        auto& slot = models[family];
        if (slot.empty()) {
            const std::uint64_t family_id = fnv1a(family.first + (family.second ? "+c" : ""));
            for (int c = 0; c < M; ++c) {
                std::vector<Eigen::Index> rows;
                for (std::size_t k = 0; k < data.labels.size(); ++k)
                    if (data.labels[k] == c) rows.push_back(static_cast<Eigen::Index>(k));
                if (per_label[static_cast<std::size_t>(c)] == 0 || rows.empty()) {
                    slot.push_back(nullptr);
                    continue;
                }
                ModelConfig mc = config.model;
                mc.covariates = family.second ? static_cast<int>(data.covariates.cols()) : 0;
                TrainConfig tc = config.train;
                tc.seed = derive_seed(config.seed, "fit", {r, f, static_cast<std::uint64_t>(c), family_id});
                const ModelData md = make_model_data(cohort.tree, data.counts(rows, Eigen::all),
                                                     family.second ? Matrix(data.covariates(rows, Eigen::all)) : Matrix());
                slot.push_back(fit_model(family.first, cohort.tree, md, mc, tc).model);
            }
        }
        std::vector<const Model*> out;
        for (const auto& m : slot) out.push_back(m.get());
        return out;
    };

    UnitOutput out;
    out.auprc.assign(config.classifiers.size(), std::vector<double>(strategies.size(), 0.0));
    const std::uint64_t augment_seed = derive_seed(config.seed, "augment", {r, f});
    const std::uint64_t classifier_seed = derive_seed(config.seed, "classifier", {r, f});
    const std::set<std::size_t> test_set(test.begin(), test.end());
    for (std::size_t si = 0; si < strategies.size(); ++si) {
        const std::string& s = strategies[si];
        std::vector<const Model*> label_models;
        if (any_synthetic && is_model_strategy(s)) label_models = models_for(s);
        const AugmentedDataset aug = augment_dataset(data, cohort.tree, s, config.beta, augment_seed, label_models, config.augment);
        for (std::size_t row = static_cast<std::size_t>(aug.original_rows); row < aug.provenance.size(); ++row)
            for (auto d : aug.provenance[row].donors)
                if (test_set.count(train[static_cast<std::size_t>(d)]))
                    throw DataError("TestLeak", "synthetic row derived from a test sample");

        const Eigen::MatrixXd train_x = features(aug.counts, config);
        for (std::size_t ci = 0; ci < config.classifiers.size(); ++ci) {
            std::vector<double> scores;
            if (config.classifiers[ci] == "logreg") {
                const auto model = LogisticRegression::fit(train_x, aug.labels, config.logreg_c);
                const Eigen::VectorXd p = model.predict(test_x);
                scores.assign(p.data(), p.data() + p.size());
            } else {
                const auto model = Mlp::fit(train_x, aug.labels, M, config.mlp, classifier_seed);
                const Eigen::MatrixXd p = model.predict_proba(test_x);
                for (Eigen::Index i = 0; i < p.rows(); ++i) scores.push_back(p(i, 1));
            }
            out.auprc[ci][si] = auprc(scores, test_labels);
        }

        if (!config.export_dir.empty()) {
            const std::filesystem::path dir(config.export_dir);
            std::filesystem::create_directories(dir);
            const std::string stem = "r" + std::to_string(repeat) + "_f" + std::to_string(fold);
            std::vector<std::string> taxa = cohort.tree.leaf_lineages();
            std::vector<std::string> sources;
            for (const auto& p : aug.provenance) sources.push_back(p.source);
            const std::string name = stem + "_" + s + "_train.tsv";
            write_counts_tsv(dir / name, aug.counts, aug.labels, sources, taxa);
            out.exported.push_back(name);
            if (si == 0) {
                const std::string tname = stem + "_test.tsv";
                write_counts_tsv(dir / tname, cohort.counts(test_rows, Eigen::all), test_labels,
                                 std::vector<std::string>(test.size(), "real"), taxa);
                out.exported.push_back(tname);
            }
        }
    }
    return out;
}

}  // namespace

BenchmarkResult cross_validate(const Cohort& cohort, const CvConfig& config) {
    validate(config);
    if (cohort.label_count() != 2) throw ConfigError("BinaryLabelsRequired", "the benchmark scores binary labels");
    BenchmarkResult res;
    res.classifiers = config.classifiers;
    res.strategies = strategy_list(config.strategies);
    res.repeats = config.repeats;
    res.folds = config.folds;
    res.fold_auprc.assign(res.classifiers.size(),
                          std::vector<std::vector<std::vector<double>>>(
                              res.strategies.size(),
                              std::vector<std::vector<double>>(static_cast<std::size_t>(config.repeats),
                                                               std::vector<double>(static_cast<std::size_t>(config.folds), 0.0))));
    std::vector<std::vector<int>> folds_of;
    for (int r = 0; r < config.repeats; ++r) {
        Rng rng = make_rng(config.seed, "cv", {static_cast<std::uint64_t>(r)});
        folds_of.push_back(stratified_folds(cohort.labels, config.folds, rng));
    }

    const int units = config.repeats * config.folds;
    std::vector<UnitOutput> outputs(static_cast<std::size_t>(units));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(units));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int u; (u = next.fetch_add(1)) < units;) {
            const int r = u / config.folds, f = u % config.folds;
            try {
                outputs[static_cast<std::size_t>(u)] = run_unit(cohort, config, res.strategies, folds_of[static_cast<std::size_t>(r)], r, f);
            } catch (...) {
                errors[static_cast<std::size_t>(u)] = std::current_exception();
            }
        }
    };
    const int threads = std::min(config.jobs, units);
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (int u = 0; u < units; ++u) {
        if (!errors[static_cast<std::size_t>(u)]) continue;
        const std::string where = "repeat " + std::to_string(u / config.folds) + " fold " + std::to_string(u % config.folds);
        try {
            std::rethrow_exception(errors[static_cast<std::size_t>(u)]);
        } catch (const Error& e) {
            throw Error(e.category(), e.code(), where + ": " + std::string(e.what()).substr(e.code().size() + 2));
        }
    }
    std::vector<std::string> exported;
    for (int u = 0; u < units; ++u) {
        const int r = u / config.folds, f = u % config.folds;
        const auto& o = outputs[static_cast<std::size_t>(u)];
        for (std::size_t ci = 0; ci < res.classifiers.size(); ++ci)
            for (std::size_t si = 0; si < res.strategies.size(); ++si)
                res.fold_auprc[ci][si][static_cast<std::size_t>(r)][static_cast<std::size_t>(f)] = o.auprc[ci][si];
        exported.insert(exported.end(), o.exported.begin(), o.exported.end());
    }
    if (!config.export_dir.empty()) {
        nlohmann::json manifest{{"files", exported}, {"config", config}, {"taxa", cohort.tree.leaf_lineages()}};
        std::ofstream(std::filesystem::path(config.export_dir) / "manifest.json") << manifest.dump(2) << "\n";
    }
    return res;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

StrategySummary summarise(const std::string& name, const std::vector<double>& values) {
    StrategySummary s;
    s.strategy = name;
    const auto R = static_cast<double>(values.size());
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / R;
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.se = values.size() > 1 ? std::sqrt(ss / (R - 1.0) / R) : 0.0;
    s.ci_low = s.mean - 1.96 * s.se;
    s.ci_high = s.mean + 1.96 * s.se;
    return s;
}

}  // namespace

BenchmarkReport benchmark_report(const BenchmarkResult& result, const std::string& reference) {
    BenchmarkReport rep;
    rep.repeats = result.repeats;
    rep.folds = result.folds;
    const bool has_ref = std::find(result.strategies.begin(), result.strategies.end(), reference) != result.strategies.end();
    rep.reference = has_ref ? reference : "none";
    for (std::size_t ci = 0; ci < result.classifiers.size(); ++ci) {
        ClassifierSummary cs;
        cs.classifier = result.classifiers[ci];
        const auto base = result.repeat_means(ci, result.strategy_index(rep.reference));
        for (std::size_t si = 0; si < result.strategies.size(); ++si) {
            const auto values = result.repeat_means(ci, si);
            StrategySummary s = summarise(result.strategies[si], values);
            if (s.strategy != rep.reference && values.size() >= 2) {
                s.tested = true;
                s.compared_to = rep.reference;
                // reference > strategy, or strategy > baseline when no reference is present
                s.test = has_ref ? paired_t_test(base, values) : paired_t_test(values, base);
                s.stars = significance_stars(s.test.p_value);
            }
            cs.strategies.push_back(s);
        }
        rep.classifiers.push_back(cs);
    }
    return rep;
}

nlohmann::json BenchmarkReport::to_json() const {
    nlohmann::json out{{"reference", reference},
                       {"repeats", repeats},
                       {"folds", folds},
                       {"test", "one-tailed paired t-test over repeat means"},
                       {"ci", "mean +- 1.96 standard errors"},
                       {"classifiers", nlohmann::json::array()}};
    for (const auto& c : classifiers) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& s : c.strategies) {
            nlohmann::json row{{"strategy", s.strategy}, {"mean", s.mean},       {"se", s.se},
                               {"ci_low", s.ci_low},     {"ci_high", s.ci_high}};
            if (s.tested) {
                row["test"] = {{"against", s.compared_to}, {"t", s.test.statistic}, {"p_value", s.test.p_value},
                               {"degenerate", s.test.degenerate}, {"stars", s.stars}};
            }
            rows.push_back(row);
        }
        out["classifiers"].push_back({{"classifier", c.classifier}, {"strategies", rows}});
    }
    return out;
}

void write_results_csv(std::ostream& out, const BenchmarkResult& result) {
    out << std::setprecision(17) << "classifier,strategy,repeat,fold,auprc\n";
    for (std::size_t ci = 0; ci < result.classifiers.size(); ++ci)
        for (std::size_t si = 0; si < result.strategies.size(); ++si) {
            const auto means = result.repeat_means(ci, si);
            for (int r = 0; r < result.repeats; ++r) {
                const auto& folds = result.fold_auprc[ci][si][static_cast<std::size_t>(r)];
                for (int f = 0; f < result.folds; ++f)
                    out << result.classifiers[ci] << ',' << result.strategies[si] << ',' << r << ',' << f << ','
                        << folds[static_cast<std::size_t>(f)] << "\n";
                out << result.classifiers[ci] << ',' << result.strategies[si] << ',' << r << ",mean,"
                    << means[static_cast<std::size_t>(r)] << "\n";
            }
        }
}

std::vector<CurveRow> subsample_study(const Cohort& cohort, const CvConfig& config, const std::vector<double>& fractions,
                                      const std::string& strategy, const std::string& classifier) {
    std::vector<CurveRow> rows;
    for (double fraction : fractions) {
        if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("InvalidFraction", "fractions must lie in (0, 1]");
        CvConfig c = config;
        c.strategies = {"none", strategy};
        c.classifiers = {classifier};
        c.reference = strategy;
        c.train_fraction = fraction;
        const auto rep = benchmark_report(cross_validate(cohort, c), strategy);
        for (const auto& s : rep.classifiers[0].strategies) rows.push_back({fraction, classifier, s.strategy, s});
    }
    return rows;
}

std::vector<CurveRow> beta_sweep(const Cohort& cohort, const CvConfig& config, const std::vector<double>& betas) {
    std::vector<CurveRow> rows;
    for (double beta : betas) {
        if (!(beta >= 1.0)) throw ConfigError("InvalidRatio", "betas must be >= 1");
        CvConfig c = config;
        c.beta = beta;
        const auto rep = benchmark_report(cross_validate(cohort, c), c.reference);
        for (const auto& cl : rep.classifiers)
            for (const auto& s : cl.strategies) rows.push_back({beta, cl.classifier, s.strategy, s});
    }
    return rows;
}

void write_curve_csv(std::ostream& out, const std::vector<CurveRow>& rows, const std::string& x_name) {
    out << std::setprecision(17) << x_name << ",classifier,strategy,mean,se,ci_low,ci_high,against,p_value,stars\n";
    for (const auto& r : rows) {
        out << r.x << ',' << r.classifier << ',' << r.strategy << ',' << r.summary.mean << ',' << r.summary.se << ','
            << r.summary.ci_low << ',' << r.summary.ci_high << ',' << r.summary.compared_to << ',';
        if (r.summary.tested) out << r.summary.test.p_value;
        out << ',' << r.summary.stars << "\n";
    }
}

}  // namespace taxapln
