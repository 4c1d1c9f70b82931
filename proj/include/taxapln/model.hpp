#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxapln/autodiff.hpp"
#include "taxapln/nn.hpp"
#include "taxapln/taxonomy.hpp"

namespace taxapln {

using ad::Matrix;

struct ModelConfig {
    int gru_hidden = 32;
    int gru_layers = 2;
    int head_width = 32;
    int film_width = 32;
    /// Width of the covariate vector; 0 means an unconditional model.
    int covariates = 0;
    /// Added to the softplus variance of every Markov step.
    double variance_floor = 1e-4;
    /// Encoder log-variances are clamped into this interval.
    double log_variance_min = -12.0;
    double log_variance_max = 6.0;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TrainConfig {
    double learning_rate = 1e-3;
    double clip_norm = 5.0;
    int batch_size = 512;
    int epochs = 10000;
    int mc_samples = 1;
    std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Model inputs for a set of samples: counts at every level as doubles,
/// their log1p transform, and optional covariates (rows aligned).
struct ModelData {
    std::vector<Matrix> counts;
    std::vector<Matrix> log_counts;
    Matrix covariates;

    Eigen::Index rows() const { return counts.empty() ? 0 : counts.front().rows(); }
    ModelData select(const std::vector<Eigen::Index>& rows) const;
    /// Stacks the rows `times` times (Monte-Carlo replicas).
    ModelData replicate(int times) const;
};

ModelData make_model_data(const TaxonomyTree& tree, const CountMatrix& leaf_counts, const Matrix& covariates = Matrix());

/// Per-level posterior quantities for one pass of the encoder.
struct LatentDraw {
    std::vector<ad::Var> mean;
    std::vector<ad::Var> log_variance;
    std::vector<ad::Var> z;
    ad::Var log_q;  ///< rows x 1
};

/// Shared interface of the hierarchical model and the flat baseline.
class Model {
public:
    virtual ~Model() = default;

    virtual std::unique_ptr<Model> clone() const = 0;
    /// "plntree" or "pln".
    virtual std::string kind() const = 0;

    const TaxonomyTree& tree() const { return tree_; }
    const ModelConfig& config() const { return config_; }
    bool conditional() const { return config_.covariates > 0; }

    ad::ParameterRefs parameters();
    std::vector<const ad::Parameter*> parameters() const;

    /// Standard normal noise for `rows` samples, in the layout elbo() takes.
    virtual std::vector<Matrix> draw_noise(Eigen::Index rows, Rng& rng) const = 0;

    /// Encoder pass and reparameterised latent draw.
    virtual LatentDraw encode(ad::Tape& tape, const ModelData& data, const std::vector<Matrix>& noise) const = 0;
    /// Per-row log p(Z), rows x 1.
    virtual ad::Var log_prior(ad::Tape& tape, const std::vector<ad::Var>& z, const Matrix& covariates) const = 0;
    /// Per-row log p(X | Z) with combinatorial constants dropped, rows x 1.
    virtual ad::Var log_emission(ad::Tape& tape, const std::vector<ad::Var>& z, const ModelData& data) const = 0;

    /// Mean over rows of log p(Z) + log p(X|Z) - log q(Z|X) at the given noise.
    ad::Var elbo(ad::Tape& tape, const ModelData& data, const std::vector<Matrix>& noise) const;

    /// Data-driven starting point (moments of the log counts).
    virtual void initialize_from_data(const ModelData& data) = 0;

    /// One posterior draw per row of `anchors`, decoded through the emission.
    /// Returns counts at every level of the tree.
    std::vector<CountMatrix> sample_posterior(const ModelData& anchors, Rng& rng) const;
    /// Ancestral draws from the prior. Conditional models need m covariate rows.
    virtual std::vector<CountMatrix> sample_prior(Eigen::Index m, const Matrix& covariates, Rng& rng) const = 0;
    /// Emission draw from latent values (one matrix per latent level).
    virtual std::vector<CountMatrix> decode(const std::vector<Matrix>& z, Rng& rng) const = 0;

protected:
    Model(TaxonomyTree tree, ModelConfig config) : tree_(std::move(tree)), config_(config) {}
    virtual void collect(ad::ParameterRefs& out) = 0;
    void check_covariates(const Matrix& covariates, Eigen::Index rows) const;

    TaxonomyTree tree_;
    ModelConfig config_;
};

/// The hierarchical model: Gaussian Markov chain over levels, Poisson counts
/// at the top level, multinomial splits of each parent over its children.
/// The variational family runs a GRU over log1p(X^1..X^L) and emits
/// q(Z^l | Z^{l+1}, X^{1:l}) from the deepest level up.
class PlnTreeModel : public Model {
public:
    PlnTreeModel(TaxonomyTree tree, ModelConfig config, std::uint64_t seed);

    std::unique_ptr<Model> clone() const override { return std::make_unique<PlnTreeModel>(*this); }
    std::string kind() const override { return "plntree"; }

    std::vector<Matrix> draw_noise(Eigen::Index rows, Rng& rng) const override;
    LatentDraw encode(ad::Tape& tape, const ModelData& data, const std::vector<Matrix>& noise) const override;
    ad::Var log_prior(ad::Tape& tape, const std::vector<ad::Var>& z, const Matrix& covariates) const override;
    ad::Var log_emission(ad::Tape& tape, const std::vector<ad::Var>& z, const ModelData& data) const override;
    void initialize_from_data(const ModelData& data) override;
    std::vector<CountMatrix> sample_prior(Eigen::Index m, const Matrix& covariates, Rng& rng) const override;
    std::vector<CountMatrix> decode(const std::vector<Matrix>& z, Rng& rng) const override;

    /// Mean and variance of Z^{l+1} given Z^l (level l -> l+1), as tape nodes.
    std::pair<ad::Var, ad::Var> transition(ad::Tape& tape, int level, const ad::Var& z, const ad::Var& covariates) const;

    // Exposed for tests and checkpoints.
    ad::Parameter top_mean;      ///< 1 x K_1
    ad::Parameter top_factor;    ///< K_1 x K_1 unconstrained, see ad::lower_factor
    std::vector<nn::Dense> dynamics;  ///< level l -> l+1, K_l -> 2 K_{l+1}
    std::vector<nn::FilmHead> prior_film;
    std::vector<nn::GruCell> gru;
    std::vector<nn::TwoLayerNet> heads;  ///< per level, -> 2 K_l
    std::vector<nn::FilmHead> encoder_film;

protected:
    void collect(ad::ParameterRefs& out) override;
};

/// Flat Poisson log-normal baseline over the leaves with a full covariance
/// latent and an amortised diagonal encoder.
class PlnModel : public Model {
public:
    PlnModel(TaxonomyTree tree, ModelConfig config, std::uint64_t seed);

    std::unique_ptr<Model> clone() const override { return std::make_unique<PlnModel>(*this); }
    std::string kind() const override { return "pln"; }

    std::vector<Matrix> draw_noise(Eigen::Index rows, Rng& rng) const override;
    LatentDraw encode(ad::Tape& tape, const ModelData& data, const std::vector<Matrix>& noise) const override;
    ad::Var log_prior(ad::Tape& tape, const std::vector<ad::Var>& z, const Matrix& covariates) const override;
    ad::Var log_emission(ad::Tape& tape, const std::vector<ad::Var>& z, const ModelData& data) const override;
    void initialize_from_data(const ModelData& data) override;
    std::vector<CountMatrix> sample_prior(Eigen::Index m, const Matrix& covariates, Rng& rng) const override;
    /// Leaf counts only are drawn; coarser levels are aggregated afterwards.
    std::vector<CountMatrix> decode(const std::vector<Matrix>& z, Rng& rng) const override;

    ad::Parameter mean;    ///< 1 x K_L
    ad::Parameter factor;  ///< K_L x K_L unconstrained
    nn::TwoLayerNet head;  ///< K_L -> 2 K_L
    nn::FilmHead encoder_film;
    nn::FilmHead prior_film;

protected:
    void collect(ad::ParameterRefs& out) override;
};

std::unique_ptr<Model> make_model(const std::string& kind, const TaxonomyTree& tree, const ModelConfig& config,
                                  std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
    std::vector<double> elbo_trace;  ///< mean ELBO per epoch
};

/// Adam on the negative ELBO with global-norm clipping, shuffled mini-batches
/// (full batch when n <= batch_size). Throws NumericError("NonFiniteLoss").
TrainResult train(Model& model, const ModelData& data, const TrainConfig& config);

struct FitResult {
    std::unique_ptr<Model> model;
    TrainResult result;
};

/// make_model + initialize_from_data + train, seeded from config.seed.
FitResult fit_model(const std::string& kind, const TaxonomyTree& tree, const ModelData& data,
                    const ModelConfig& model_config, const TrainConfig& train_config);

/// Moving average with the given window (shorter at the start).
std::vector<double> smooth_trace(const std::vector<double>& trace, int window);

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
    std::unique_ptr<Model> model;
    std::vector<double> trace;
    std::string label;
    TrainConfig train_config;
};

nlohmann::json checkpoint_json(const Model& model, const std::vector<double>& trace, const std::string& label,
                               const TrainConfig& train_config);
Checkpoint load_checkpoint(const nlohmann::json& doc);

}  // namespace taxapln
