#include "taxapln/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "taxapln/error.hpp"

namespace taxapln {

using ad::Parameter;
using ad::Tape;
using ad::Var;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
// exp(25) ~ 7e10 reads per taxon is far beyond any sequencing depth; the cap
// only keeps Poisson sampling finite for wild prior draws.
constexpr double kMaxLogRate = 25.0;

Var param(Tape& tape, const Parameter& p) { return tape.parameter(const_cast<Parameter&>(p)); }

Matrix lower_from_raw(const Matrix& raw) {
    Matrix l = raw.triangularView<Eigen::StrictlyLower>();
    l.diagonal() = raw.diagonal().array().exp().matrix();
    return l;
}

/// Full-covariance Gaussian log density per row with covariance L L^T.
Var gaussian_full(Tape& tape, const Var& z, const Var& mean, const Parameter& raw) {
    const Eigen::Index k = raw.value.rows();
    Var r = param(tape, raw);
    Var w = ad::tri_solve_rows(ad::lower_factor(r), z - mean);
    Var log_det = ad::sum(r * tape.constant(Matrix::Identity(k, k)));
    return -0.5 * ad::row_sum(ad::square(w)) - log_det - 0.5 * static_cast<double>(k) * kLog2Pi;
}

/// Diagonal Gaussian log density per row.
Var gaussian_diag(const Var& z, const Var& mean, const Var& log_var) {
    const double k = static_cast<double>(z.cols());
    return -0.5 * ad::row_sum(log_var + ad::square(z - mean) * ad::exp(-log_var)) - 0.5 * k * kLog2Pi;
}

/// m + exp(lv / 2) * eps along with log q per row.
std::pair<Var, Var> reparameterize(Tape& tape, const Var& m, const Var& lv, const Matrix& eps) {
    Var z = m + ad::exp(0.5 * lv) * tape.constant(eps);
    const Matrix c = (-0.5 * eps.array().square() - 0.5 * kLog2Pi).matrix().rowwise().sum();
    Var logq = -0.5 * ad::row_sum(lv) + tape.constant(c);
    return {z, logq};
}

double softplus_inverse(double y) { return y > 30 ? y : std::log(std::expm1(y)); }

Eigen::RowVectorXd column_std(const Matrix& x) {
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const double n = static_cast<double>(std::max<Eigen::Index>(x.rows() - 1, 1));
    return ((x.rowwise() - mu).array().square().colwise().sum() / n).sqrt().matrix();
}

std::int64_t poisson_draw(double log_rate, Rng& rng) {
    const double rate = std::exp(std::min(log_rate, kMaxLogRate));
    if (!(rate > 1e-300)) return 0;
    std::poisson_distribution<std::int64_t> d(rate);
    return d(rng);
}

void check_noise(const std::vector<Matrix>& noise, const std::vector<int>& widths, Eigen::Index rows) {
    if (noise.size() != widths.size())
        throw NumericError("ShapeMismatch", "noise has " + std::to_string(noise.size()) + " levels, expected " +
                                                std::to_string(widths.size()));
    for (std::size_t l = 0; l < widths.size(); ++l)
        if (noise[l].rows() != rows || noise[l].cols() != widths[l])
            throw NumericError("ShapeMismatch", "noise level " + std::to_string(l) + " has the wrong shape");
}

}  // namespace

// ---------------------------------------------------------------------------
// Configs

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"gru_hidden", c.gru_hidden},       {"gru_layers", c.gru_layers},
         {"head_width", c.head_width},       {"film_width", c.film_width},
         {"covariates", c.covariates},       {"variance_floor", c.variance_floor},
         {"log_variance_min", c.log_variance_min}, {"log_variance_max", c.log_variance_max}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c = ModelConfig{};
    c.gru_hidden = j.value("gru_hidden", c.gru_hidden);
    c.gru_layers = j.value("gru_layers", c.gru_layers);
    c.head_width = j.value("head_width", c.head_width);
    c.film_width = j.value("film_width", c.film_width);
    c.covariates = j.value("covariates", c.covariates);
    c.variance_floor = j.value("variance_floor", c.variance_floor);
    c.log_variance_min = j.value("log_variance_min", c.log_variance_min);
    c.log_variance_max = j.value("log_variance_max", c.log_variance_max);
    if (c.gru_hidden < 1 || c.gru_layers < 1 || c.head_width < 1 || c.film_width < 1 || c.covariates < 0)
        throw ConfigError("InvalidModelConfig", "network widths must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"learning_rate", c.learning_rate}, {"clip_norm", c.clip_norm}, {"batch_size", c.batch_size},
         {"epochs", c.epochs},               {"mc_samples", c.mc_samples}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.mc_samples = j.value("mc_samples", c.mc_samples);
    c.seed = j.value("seed", c.seed);
}

// ---------------------------------------------------------------------------
// Data

ModelData ModelData::select(const std::vector<Eigen::Index>& rows) const {
    ModelData out;
    auto pick = [&](const Matrix& m) {
        Matrix r(static_cast<Eigen::Index>(rows.size()), m.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) r.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
        return r;
    };
    for (const auto& m : counts) out.counts.push_back(pick(m));
    for (const auto& m : log_counts) out.log_counts.push_back(pick(m));
    out.covariates = covariates.cols() > 0 ? pick(covariates) : Matrix(static_cast<Eigen::Index>(rows.size()), 0);
    return out;
}

ModelData ModelData::replicate(int times) const {
    std::vector<Eigen::Index> rows;
    for (int t = 0; t < times; ++t)
        for (Eigen::Index i = 0; i < this->rows(); ++i) rows.push_back(i);
    return select(rows);
}

ModelData make_model_data(const TaxonomyTree& tree, const CountMatrix& leaf_counts, const Matrix& covariates) {
    if (leaf_counts.cols() != tree.leaf_count())
        throw DataError("LengthMismatch", "count matrix has " + std::to_string(leaf_counts.cols()) +
                                              " columns for " + std::to_string(tree.leaf_count()) + " leaves");
    if ((leaf_counts.array() < 0).any()) throw DataError("NegativeValue", "counts must be nonnegative");
    if (covariates.cols() > 0 && covariates.rows() != leaf_counts.rows())
        throw DataError("ShapeMismatch", "covariate rows do not match count rows");
    ModelData d;
    for (const auto& level : aggregate_levels(tree, leaf_counts)) {
        d.counts.push_back(level.cast<double>());
        d.log_counts.push_back(d.counts.back().array().log1p().matrix());
    }
    d.covariates = covariates.cols() > 0 ? covariates : Matrix(leaf_counts.rows(), 0);
    return d;
}

// ---------------------------------------------------------------------------
// Base

ad::ParameterRefs Model::parameters() {
    ad::ParameterRefs out;
    collect(out);
    return out;
}

std::vector<const Parameter*> Model::parameters() const {
    ad::ParameterRefs refs;
    const_cast<Model*>(this)->collect(refs);
    return {refs.begin(), refs.end()};
}

void Model::check_covariates(const Matrix& covariates, Eigen::Index rows) const {
    if (!conditional()) return;
    if (covariates.cols() != config_.covariates || covariates.rows() != rows)
        throw DataError("CovariateDimensionMismatch",
                        "conditional model expects " + std::to_string(rows) + " x " + std::to_string(config_.covariates) +
                            " covariates, got " + std::to_string(covariates.rows()) + " x " +
                            std::to_string(covariates.cols()));
}

Var Model::elbo(Tape& tape, const ModelData& data, const std::vector<Matrix>& noise) const {
    if (data.rows() == 0) throw DataError("EmptyInput", "ELBO needs at least one sample");
    const LatentDraw draw = encode(tape, data, noise);
    return ad::mean(log_prior(tape, draw.z, data.covariates) + log_emission(tape, draw.z, data) - draw.log_q);
}

std::vector<CountMatrix> Model::sample_posterior(const ModelData& anchors, Rng& rng) const {
    const auto noise = draw_noise(anchors.rows(), rng);
    Tape tape;
    const LatentDraw draw = encode(tape, anchors, noise);
    std::vector<Matrix> z;
    for (const auto& v : draw.z) z.push_back(v.value());
    return decode(z, rng);
}

// ---------------------------------------------------------------------------
// PLN-Tree

PlnTreeModel::PlnTreeModel(TaxonomyTree tree, ModelConfig config, std::uint64_t seed)
    : Model(std::move(tree), config) {
    const auto K = tree_.layer_sizes();
    const int L = tree_.depth();
    const int H = config_.gru_hidden;
    Rng base = make_rng(seed, "base");
    // FiLM heads draw from their own stream so the remaining parameters are
    // the same with or without covariates.
    Rng film = make_rng(seed, "film");

    top_mean = Parameter("prior.top_mean", Matrix::Zero(1, K[0]));
    top_factor = Parameter("prior.top_factor", Matrix::Zero(K[0], K[0]));
    for (int l = 0; l + 1 < L; ++l)
        dynamics.emplace_back("prior.dynamics." + std::to_string(l), K[l], 2 * K[l + 1], base);
    for (int g = 0; g < config_.gru_layers; ++g)
        gru.emplace_back("encoder.gru." + std::to_string(g), g == 0 ? tree_.max_layer_size() : H, H, base);
    for (int l = 0; l < L; ++l) {
        const int in = H + K[l] + (l + 1 < L ? K[l + 1] : 0);
        heads.emplace_back("encoder.head." + std::to_string(l), in, config_.head_width, 2 * K[l], base);
    }
    if (conditional()) {
        for (int l = 0; l + 1 < L; ++l) {
            prior_film.emplace_back("prior.film." + std::to_string(l), config_.covariates, config_.film_width, K[l], film);
            prior_film.back().make_identity();
        }
        for (int l = 0; l < L; ++l) {
            encoder_film.emplace_back("encoder.film." + std::to_string(l), config_.covariates, config_.film_width,
                                      heads[l].hidden.in(), film);
            encoder_film.back().make_identity();
        }
    }
}

void PlnTreeModel::collect(ad::ParameterRefs& out) {
    out.push_back(&top_mean);
    out.push_back(&top_factor);
    for (auto& d : dynamics) d.collect(out);
    for (auto& g : gru) g.collect(out);
    for (auto& h : heads) h.collect(out);
    for (auto& f : prior_film) f.collect(out);
    for (auto& f : encoder_film) f.collect(out);
}

std::vector<Matrix> PlnTreeModel::draw_noise(Eigen::Index rows, Rng& rng) const {
    std::vector<Matrix> out;
    for (int l = 0; l < tree_.depth(); ++l) out.push_back(standard_normal(rows, tree_.layer_size(l), rng));
    return out;
}

LatentDraw PlnTreeModel::encode(Tape& tape, const ModelData& data, const std::vector<Matrix>& noise) const {
    const int L = tree_.depth();
    const Eigen::Index n = data.rows();
    if (static_cast<int>(data.counts.size()) != L) throw DataError("ShapeMismatch", "data levels do not match the tree");
    check_noise(noise, tree_.layer_sizes(), n);
    check_covariates(data.covariates, n);
    Var cov = conditional() ? tape.constant(data.covariates) : Var();

    // E^l: top GRU output after reading levels 1..l, inputs zero-padded to K_max.
    const int K_max = tree_.max_layer_size();
    std::vector<Var> hidden(gru.size());
    for (auto& h : hidden) h = tape.constant(Matrix::Zero(n, config_.gru_hidden));
    std::vector<Var> summary(L);
    for (int l = 0; l < L; ++l) {
        Matrix padded = Matrix::Zero(n, K_max);
        padded.leftCols(data.log_counts[l].cols()) = data.log_counts[l];
        Var x = tape.constant(std::move(padded));
        for (std::size_t g = 0; g < gru.size(); ++g) {
            hidden[g] = gru[g](tape, x, hidden[g]);
            x = hidden[g];
        }
        summary[l] = x;
    }

    LatentDraw draw;
    draw.mean.resize(L);
    draw.log_variance.resize(L);
    draw.z.resize(L);
    for (int l = L - 1; l >= 0; --l) {
        const int K = tree_.layer_size(l);
        Var log_x = tape.constant(data.log_counts[l]);
        std::vector<Var> parts{summary[l], log_x};
        if (l + 1 < L) parts.push_back(draw.z[l + 1]);
        Var a = ad::concat_cols(parts);
        if (conditional()) a = encoder_film[l](tape, a, cov);
        Var out = heads[l](tape, a);
        // residual: the head predicts a correction to log1p(X^l)
        draw.mean[l] = log_x + ad::slice_cols(out, 0, K);
        draw.log_variance[l] = ad::clamp(ad::slice_cols(out, K, K), config_.log_variance_min, config_.log_variance_max);
        auto [z, logq] = reparameterize(tape, draw.mean[l], draw.log_variance[l], noise[l]);
        draw.z[l] = z;
        draw.log_q = l == L - 1 ? logq : draw.log_q + logq;
    }
    return draw;
}

std::pair<Var, Var> PlnTreeModel::transition(Tape& tape, int level, const Var& z, const Var& cov) const {
    const int K = tree_.layer_size(level + 1);
    Var a = conditional() ? prior_film[level](tape, z, cov) : z;
    Var out = dynamics[level](tape, a);
    return {ad::slice_cols(out, 0, K), ad::softplus(ad::slice_cols(out, K, K)) + config_.variance_floor};
}

Var PlnTreeModel::log_prior(Tape& tape, const std::vector<Var>& z, const Matrix& covariates) const {
    const int L = tree_.depth();
    if (static_cast<int>(z.size()) != L) throw NumericError("ShapeMismatch", "latent levels do not match the tree");
    check_covariates(covariates, z[0].rows());
    Var cov = conditional() ? tape.constant(covariates) : Var();
    Var lp = gaussian_full(tape, z[0], param(tape, top_mean), top_factor);
    for (int l = 0; l + 1 < L; ++l) {
        auto [mean, var] = transition(tape, l, z[l], cov);
        lp = lp + gaussian_diag(z[l + 1], mean, ad::log(var));
    }
    return lp;
}

Var PlnTreeModel::log_emission(Tape& tape, const std::vector<Var>& z, const ModelData& data) const {
    const int L = tree_.depth();
    if (static_cast<int>(z.size()) != L || static_cast<int>(data.counts.size()) != L)
        throw NumericError("ShapeMismatch", "latent levels do not match the tree");
    // Poisson at the top level without log X!
    Var x0 = tape.constant(data.counts[0]);
    Var le = ad::row_sum(x0 * z[0] - ad::exp(z[0]));
    // multinomial splits without the coefficient
    for (int l = 1; l < L; ++l)
        le = le + ad::row_sum(tape.constant(data.counts[l]) * ad::segment_log_softmax(z[l], tree_.parents(l)));
    return le;
}

void PlnTreeModel::initialize_from_data(const ModelData& data) {
    if (data.rows() == 0) throw DataError("EmptyInput", "cannot initialise from an empty data set");
    const int L = tree_.depth();
    top_mean.value = data.log_counts[0].colwise().mean();
    top_factor.value.setZero();
    top_factor.value.diagonal() = column_std(data.log_counts[0]).array().max(0.05).log().matrix().transpose();
    for (int l = 0; l + 1 < L; ++l) {
        const int K = tree_.layer_size(l + 1);
        auto& w = dynamics[l].weight.value;
        auto& b = dynamics[l].bias.value;
        const Matrix pred = data.log_counts[l] * w.leftCols(K);
        b.leftCols(K) = data.log_counts[l + 1].colwise().mean() - pred.colwise().mean();
        const Matrix resid = data.log_counts[l + 1] - (pred.rowwise() + b.leftCols(K).row(0));
        const Eigen::RowVectorXd sd = column_std(resid);
        for (int k = 0; k < K; ++k)
            b(0, K + k) = softplus_inverse(std::max(sd(k) * sd(k) - config_.variance_floor, 1e-2)) -
                          (data.log_counts[l] * w.col(K + k)).mean();
    }
    for (int l = 0; l < L; ++l) {
        const int K = tree_.layer_size(l);
        const Eigen::RowVectorXd mean_count = data.counts[l].colwise().mean();
        for (int k = 0; k < K; ++k) heads[l].output.bias.value(0, K + k) = -std::log1p(mean_count(k));
    }
}

std::vector<CountMatrix> PlnTreeModel::sample_prior(Eigen::Index m, const Matrix& covariates, Rng& rng) const {
    check_covariates(covariates, m);
    const int L = tree_.depth();
    std::vector<Matrix> z(L);
    const Matrix lower = lower_from_raw(top_factor.value);
    z[0] = (standard_normal(m, tree_.layer_size(0), rng) * lower.transpose()).rowwise() + top_mean.value.row(0);
    Tape tape;
    Var cov = conditional() ? tape.constant(covariates) : Var();
    for (int l = 0; l + 1 < L; ++l) {
        auto [mean, var] = transition(tape, l, tape.constant(z[l]), cov);
        const Matrix eps = standard_normal(m, tree_.layer_size(l + 1), rng);
        z[l + 1] = mean.value().array() + var.value().array().sqrt() * eps.array();
    }
    return decode(z, rng);
}

std::vector<CountMatrix> PlnTreeModel::decode(const std::vector<Matrix>& z, Rng& rng) const {
    const int L = tree_.depth();
    if (static_cast<int>(z.size()) != L) throw NumericError("ShapeMismatch", "latent levels do not match the tree");
    const Eigen::Index n = z[0].rows();
    std::vector<CountMatrix> x(L);
    for (int l = 0; l < L; ++l) x[l] = CountMatrix::Zero(n, tree_.layer_size(l));
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int k = 0; k < tree_.layer_size(0); ++k) x[0](i, k) = poisson_draw(z[0](i, k), rng);
        for (int l = 0; l + 1 < L; ++l) {
            for (int k = 0; k < tree_.layer_size(l); ++k) {
                const auto& ch = tree_.children(l, k);
                const std::int64_t total = x[l](i, k);
                if (total == 0) continue;
                if (ch.size() == 1) {
                    x[l + 1](i, ch[0]) = total;
                    continue;
                }
                Eigen::VectorXd logits(ch.size());
                for (std::size_t c = 0; c < ch.size(); ++c) logits(c) = z[l + 1](i, ch[c]);
                const Eigen::VectorXd p = (logits.array() - logits.maxCoeff()).exp().matrix();
                const auto draw = multinomial(total, p, rng);
                for (std::size_t c = 0; c < ch.size(); ++c) x[l + 1](i, ch[c]) = draw(c);
            }
        }
    }
    return x;
}

// ---------------------------------------------------------------------------
// Flat PLN

PlnModel::PlnModel(TaxonomyTree tree, ModelConfig config, std::uint64_t seed) : Model(std::move(tree), config) {
    const int K = tree_.leaf_count();
    Rng base = make_rng(seed, "base");
    Rng film = make_rng(seed, "film");
    mean = Parameter("prior.mean", Matrix::Zero(1, K));
    factor = Parameter("prior.factor", Matrix::Zero(K, K));
    head = nn::TwoLayerNet("encoder.head", K, config_.head_width, 2 * K, base);
    if (conditional()) {
        encoder_film = nn::FilmHead("encoder.film", config_.covariates, config_.film_width, K, film);
        encoder_film.make_identity();
        prior_film = nn::FilmHead("prior.film", config_.covariates, config_.film_width, K, film);
        prior_film.make_identity();
    }
}

void PlnModel::collect(ad::ParameterRefs& out) {
    out.push_back(&mean);
    out.push_back(&factor);
    head.collect(out);
    if (conditional()) {
        encoder_film.collect(out);
        prior_film.collect(out);
    }
}

std::vector<Matrix> PlnModel::draw_noise(Eigen::Index rows, Rng& rng) const {
    return {standard_normal(rows, tree_.leaf_count(), rng)};
}

LatentDraw PlnModel::encode(Tape& tape, const ModelData& data, const std::vector<Matrix>& noise) const {
    const Eigen::Index n = data.rows();
    const int K = tree_.leaf_count();
    check_noise(noise, {K}, n);
    check_covariates(data.covariates, n);
    Var log_x = tape.constant(data.log_counts.back());
    Var a = conditional() ? encoder_film(tape, log_x, tape.constant(data.covariates)) : log_x;
    Var out = head(tape, a);
    LatentDraw draw;
    draw.mean = {log_x + ad::slice_cols(out, 0, K)};
    draw.log_variance = {ad::clamp(ad::slice_cols(out, K, K), config_.log_variance_min, config_.log_variance_max)};
    auto [z, logq] = reparameterize(tape, draw.mean[0], draw.log_variance[0], noise[0]);
    draw.z = {z};
    draw.log_q = logq;
    return draw;
}

Var PlnModel::log_prior(Tape& tape, const std::vector<Var>& z, const Matrix& covariates) const {
    if (z.size() != 1) throw NumericError("ShapeMismatch", "flat model has a single latent level");
    check_covariates(covariates, z[0].rows());
    Var mu = param(tape, mean);
    if (conditional()) mu = prior_film(tape, mu, tape.constant(covariates));
    return gaussian_full(tape, z[0], mu, factor);
}

Var PlnModel::log_emission(Tape& tape, const std::vector<Var>& z, const ModelData& data) const {
    if (z.size() != 1) throw NumericError("ShapeMismatch", "flat model has a single latent level");
    Var x = tape.constant(data.counts.back());
    return ad::row_sum(x * z[0] - ad::exp(z[0]));
}

void PlnModel::initialize_from_data(const ModelData& data) {
    if (data.rows() == 0) throw DataError("EmptyInput", "cannot initialise from an empty data set");
    const int K = tree_.leaf_count();
    mean.value = data.log_counts.back().colwise().mean();
    factor.value.setZero();
    factor.value.diagonal() = column_std(data.log_counts.back()).array().max(0.05).log().matrix().transpose();
    const Eigen::RowVectorXd mean_count = data.counts.back().colwise().mean();
    for (int k = 0; k < K; ++k) head.output.bias.value(0, K + k) = -std::log1p(mean_count(k));
}

std::vector<CountMatrix> PlnModel::sample_prior(Eigen::Index m, const Matrix& covariates, Rng& rng) const {
    check_covariates(covariates, m);
    Matrix mu = mean.value.replicate(m, 1);
    if (conditional()) {
        Tape tape;
        mu = prior_film(tape, tape.constant(mean.value), tape.constant(covariates)).value();
    }
    const Matrix lower = lower_from_raw(factor.value);
    const Matrix z = mu + standard_normal(m, tree_.leaf_count(), rng) * lower.transpose();
    return decode({z}, rng);
}

std::vector<CountMatrix> PlnModel::decode(const std::vector<Matrix>& z, Rng& rng) const {
    if (z.size() != 1 || z[0].cols() != tree_.leaf_count())
        throw NumericError("ShapeMismatch", "latent does not match the leaf count");
    CountMatrix leaves(z[0].rows(), z[0].cols());
    for (Eigen::Index i = 0; i < leaves.rows(); ++i)
        for (Eigen::Index k = 0; k < leaves.cols(); ++k) leaves(i, k) = poisson_draw(z[0](i, k), rng);
    return aggregate_levels(tree_, leaves);
}

std::unique_ptr<Model> make_model(const std::string& kind, const TaxonomyTree& tree, const ModelConfig& config,
                                  std::uint64_t seed) {
    if (kind == "plntree") return std::make_unique<PlnTreeModel>(tree, config, seed);
    if (kind == "pln") return std::make_unique<PlnModel>(tree, config, seed);
    throw ConfigError("UnknownModel", "unknown model kind '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(Model& model, const ModelData& data, const TrainConfig& config) {
    const Eigen::Index n = data.rows();
    if (n == 0) throw DataError("EmptyInput", "training set is empty");
    if (config.epochs < 0 || config.batch_size < 1 || config.mc_samples < 1 || !(config.learning_rate > 0) ||
        !(config.clip_norm > 0))
        throw ConfigError("InvalidTrainConfig", "epochs >= 0, batch_size >= 1, mc_samples >= 1, lr > 0, clip > 0");
    const auto params = model.parameters();
    ad::AdamState adam;
    adam.learning_rate = config.learning_rate;
    Rng rng = make_rng(config.seed, "train");

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const bool full_batch = n <= config.batch_size;
    const ModelData full = config.mc_samples > 1 ? data.replicate(config.mc_samples) : ModelData{};

    TrainResult result;
    result.elbo_trace.reserve(static_cast<std::size_t>(config.epochs));
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        if (!full_batch) std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (Eigen::Index start = 0; start < n; start += config.batch_size) {
            const Eigen::Index stop = std::min<Eigen::Index>(n, start + config.batch_size);
            ModelData batch_store;
            const ModelData* batch = &data;
            if (!full_batch) {
                batch_store = data.select({order.begin() + start, order.begin() + stop});
                if (config.mc_samples > 1) batch_store = batch_store.replicate(config.mc_samples);
                batch = &batch_store;
            } else if (config.mc_samples > 1) {
                batch = &full;
            }
            const auto noise = model.draw_noise(batch->rows(), rng);
            ad::zero_grad(params);
            Tape tape;
            Var e = model.elbo(tape, *batch, noise);
            const double value = e.value()(0, 0);
            if (!std::isfinite(value))
                throw NumericError("NonFiniteLoss", "ELBO is " + std::to_string(value) + " at epoch " +
                                                        std::to_string(epoch) + ", batch starting at row " +
                                                        std::to_string(start));
            tape.backward(-1.0 * e);
            const double norm = ad::clip_gradients(params, config.clip_norm);
            if (!std::isfinite(norm))
                throw NumericError("NonFiniteLoss", "gradient norm is not finite at epoch " + std::to_string(epoch));
            ad::adam_step(params, adam);
            total += value * static_cast<double>(stop - start);
        }
        result.elbo_trace.push_back(total / static_cast<double>(n));
    }
    return result;
}

FitResult fit_model(const std::string& kind, const TaxonomyTree& tree, const ModelData& data,
                    const ModelConfig& model_config, const TrainConfig& train_config) {
    FitResult out;
    out.model = make_model(kind, tree, model_config, derive_seed(train_config.seed, "init"));
    out.model->initialize_from_data(data);
    out.result = train(*out.model, data, train_config);
    return out;
}

std::vector<double> smooth_trace(const std::vector<double>& trace, int window) {
    if (window < 1) throw ConfigError("InvalidWindow", "smoothing window must be >= 1");
    std::vector<double> out(trace.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < trace.size(); ++i) {
        acc += trace[i];
        if (i >= static_cast<std::size_t>(window)) acc -= trace[i - window];
        out[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, window));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kFormat = "taxapln-checkpoint";
constexpr int kVersion = 1;

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

nlohmann::json checkpoint_json(const Model& model, const std::vector<double>& trace, const std::string& label,
                               const TrainConfig& train_config) {
    nlohmann::json params = nlohmann::json::object();
    for (const Parameter* p : model.parameters()) {
        std::vector<double> data(p->value.data(), p->value.data() + p->value.size());
        params[p->name] = {{"rows", p->value.rows()}, {"cols", p->value.cols()}, {"data", data}};
    }
    return {{"format", kFormat},
            {"version", kVersion},
            {"model_kind", model.kind()},
            {"taxonomy_hash", hex64(model.tree().hash())},
            {"lineages", model.tree().leaf_lineages()},
            {"model_config", model.config()},
            {"train_config", train_config},
            {"label", label},
            {"parameters", params},
            {"trace", trace}};
}

Checkpoint load_checkpoint(const nlohmann::json& doc) {
    try {
        if (doc.at("format") != kFormat) throw DataError("BadCheckpoint", "not a checkpoint document");
        if (doc.at("version").get<int>() != kVersion)
            throw DataError("BadCheckpoint", "unsupported checkpoint version " + doc.at("version").dump());
        const auto tree = TaxonomyTree::from_lineages(doc.at("lineages").get<std::vector<std::string>>());
        if (hex64(tree.hash()) != doc.at("taxonomy_hash").get<std::string>())
            throw DataError("TaxonomyMismatch", "checkpoint lineages do not match its taxonomy hash");
        Checkpoint c;
        c.model = make_model(doc.at("model_kind").get<std::string>(), tree, doc.at("model_config").get<ModelConfig>(), 0);
        c.train_config = doc.at("train_config").get<TrainConfig>();
        c.label = doc.at("label").get<std::string>();
        c.trace = doc.at("trace").get<std::vector<double>>();
        const auto& params = doc.at("parameters");
        for (Parameter* p : c.model->parameters()) {
            if (!params.contains(p->name)) throw DataError("BadCheckpoint", "missing parameter '" + p->name + "'");
            const auto& e = params.at(p->name);
            const auto data = e.at("data").get<std::vector<double>>();
            if (e.at("rows").get<Eigen::Index>() != p->value.rows() || e.at("cols").get<Eigen::Index>() != p->value.cols() ||
                static_cast<Eigen::Index>(data.size()) != p->value.size())
                throw DataError("BadCheckpoint", "parameter '" + p->name + "' has the wrong shape");
            p->value = Eigen::Map<const Matrix>(data.data(), p->value.rows(), p->value.cols());
            p->zero_grad();
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("BadCheckpoint", e.what());
    }
}

}  // namespace taxapln
