#include <cmath>

#include "doctest.h"
#include "taxapln/error.hpp"
#include "taxapln/model.hpp"

using namespace taxapln;
using ad::Tape;
using ad::Var;

namespace {

const double kLog2Pi = std::log(2.0 * M_PI);

TaxonomyTree two_level() { return TaxonomyTree::from_lineages({"A|x", "A|y", "B|z", "B|w", "B|v"}); }

CountMatrix leaf_rows(std::initializer_list<std::initializer_list<std::int64_t>> rows) {
    CountMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& r : rows) {
        Eigen::Index j = 0;
        for (auto v : r) m(i, j++) = v;
        ++i;
    }
    return m;
}

CountMatrix random_counts(Eigen::Index n, Eigen::Index k, int hi, Rng& rng) {
    std::uniform_int_distribution<int> u(0, hi);
    CountMatrix m(n, k);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

/// Scalar softplus used by the hand oracles.
double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Freezes a depth-1, single-taxon tree model to q = N(m, v) for X = 0.
void freeze_single(PlnTreeModel& model, double m, double log_v) {
    model.heads[0].output.weight.value.setZero();
    model.heads[0].output.bias.value << m, log_v;
}

}  // namespace

TEST_CASE("log prior on a single standard normal") {
    PlnTreeModel model(TaxonomyTree::from_lineages({"A"}), {}, 1);
    Tape t;
    Var lp = model.log_prior(t, {t.constant(Matrix::Zero(1, 1))}, Matrix());
    CHECK(lp.value()(0, 0) == doctest::Approx(-0.5 * kLog2Pi).epsilon(1e-14));

    // shifting both the point and the mean leaves the density alone
    model.top_mean.value << 1.7;
    Tape t2;
    Var shifted = model.log_prior(t2, {t2.constant(Matrix::Constant(1, 1, 1.7))}, Matrix());
    CHECK(shifted.value()(0, 0) == doctest::Approx(-0.5 * kLog2Pi).epsilon(1e-14));
}

TEST_CASE("two-level log prior matches an explicit density product") {
    const auto tree = two_level();
    PlnTreeModel model(tree, {}, 2);
    Rng rng(3);
    model.top_mean.value = Matrix::Random(1, 2);
    model.top_factor.value << 0.3, 0.0, -0.8, -0.2;
    model.dynamics[0].bias.value = Matrix::Random(1, 10);
    const Matrix z0 = standard_normal(4, 2, rng), z1 = standard_normal(4, 5, rng);
    Tape t;
    const Matrix lp = model.log_prior(t, {t.constant(z0), t.constant(z1)}, Matrix()).value();

    // oracle: Sigma = L L^T with an explicit inverse and determinant
    Eigen::Matrix2d l;
    l << std::exp(0.3), 0.0, -0.8, std::exp(-0.2);
    const Eigen::Matrix2d sigma = l * l.transpose();
    const Matrix& W = model.dynamics[0].weight.value;
    const Matrix& b = model.dynamics[0].bias.value;
    for (int i = 0; i < 4; ++i) {
        const Eigen::Vector2d d = z0.row(i).transpose() - model.top_mean.value.row(0).transpose();
        double expect = -kLog2Pi - 0.5 * std::log(sigma.determinant()) - 0.5 * d.dot(sigma.inverse() * d);
        const Eigen::RowVectorXd out = z0.row(i) * W + b;
        for (int k = 0; k < 5; ++k) {
            const double var = softplus(out(5 + k)) + 1e-4;
            const double r = z1(i, k) - out(k);
            expect += -0.5 * std::log(2 * M_PI * var) - 0.5 * r * r / var;
        }
        CHECK(std::abs(lp(i, 0) - expect) < 1e-10);
    }
}

TEST_CASE("log emission closed forms") {
    SUBCASE("Poisson at zero") {
        PlnTreeModel model(TaxonomyTree::from_lineages({"A"}), {}, 1);
        const auto data = make_model_data(model.tree(), leaf_rows({{0}}));
        Tape t;
        CHECK(model.log_emission(t, {t.constant(Matrix::Zero(1, 1))}, data).value()(0, 0) == -1.0);
    }
    SUBCASE("single child contributes nothing") {
        PlnTreeModel model(TaxonomyTree::from_lineages({"A|x"}), {}, 1);
        const auto data = make_model_data(model.tree(), leaf_rows({{4}}));
        Tape t;
        const double v =
            model.log_emission(t, {t.constant(Matrix::Zero(1, 1)), t.constant(Matrix::Constant(1, 1, 3.3))}, data)
                .value()(0, 0);
        CHECK(v == doctest::Approx(-1.0).epsilon(1e-15));  // Poisson part only
    }
    SUBCASE("two children with equal logits") {
        PlnTreeModel model(TaxonomyTree::from_lineages({"A|x", "A|y"}), {}, 1);
        const auto data = make_model_data(model.tree(), leaf_rows({{2, 1}}));
        Tape t;
        const double v =
            model.log_emission(t, {t.constant(Matrix::Zero(1, 1)), t.constant(Matrix::Zero(1, 2))}, data).value()(0, 0);
        // Poisson: 3*0 - e^0 ; multinomial: 3 log 0.5
        CHECK(v - (-1.0) == doctest::Approx(3.0 * std::log(0.5)).epsilon(1e-14));
    }
    SUBCASE("shifting one node's child logits changes nothing") {
        const auto tree = two_level();
        PlnTreeModel model(tree, {}, 1);
        Rng rng(6);
        const auto data = make_model_data(tree, random_counts(3, 5, 30, rng));
        const Matrix z0 = standard_normal(3, 2, rng);
        Matrix z1 = standard_normal(3, 5, rng);
        Tape t;
        const Matrix a = model.log_emission(t, {t.constant(z0), t.constant(z1)}, data).value();
        z1.col(2).array() += 4.2;
        z1.col(3).array() += 4.2;
        z1.col(4).array() += 4.2;
        const Matrix b = model.log_emission(t, {t.constant(z0), t.constant(z1)}, data).value();
        CHECK((a - b).cwiseAbs().maxCoeff() < 1e-11);
    }
}

TEST_CASE("film modulation") {
    Rng rng(4);
    Tape t;
    const Matrix a = standard_normal(3, 4, rng);
    SUBCASE("identity") {
        Var out = nn::film_modulate(t.constant(a), t.constant(Matrix::Ones(3, 4)), t.constant(Matrix::Zero(3, 4)));
        CHECK((out.value().array() == a.array()).all());
    }
    SUBCASE("alpha zero keeps only gamma") {
        const Matrix g = standard_normal(3, 4, rng);
        Var out = nn::film_modulate(t.constant(a), t.constant(Matrix::Zero(3, 4)), t.constant(g));
        CHECK((out.value().array() == g.array()).all());
    }
    SUBCASE("known weights against a hand computation") {
        nn::FilmHead head("f", 2, 3, 4, rng);
        const Matrix c = standard_normal(3, 2, rng);
        Var out = head(t, t.constant(a), t.constant(c));
        const Matrix hidden = ((c * head.net.hidden.weight.value).rowwise() + head.net.hidden.bias.value.row(0))
                                  .array()
                                  .tanh()
                                  .matrix();
        const Matrix raw = (hidden * head.net.output.weight.value).rowwise() + head.net.output.bias.value.row(0);
        const Matrix expect = a.array() * (raw.leftCols(4).array() + 1.0) + raw.rightCols(4).array();
        CHECK((out.value() - expect).cwiseAbs().maxCoeff() < 1e-14);
    }
    SUBCASE("shape errors") {
        CHECK_THROWS_AS(nn::film_modulate(t.constant(a), t.constant(Matrix::Ones(3, 3)), t.constant(Matrix::Zero(3, 4))),
                        NumericError);
    }
}

TEST_CASE("identity FiLM reproduces the unconditional ELBO bitwise") {
    const auto tree = two_level();
    Rng rng(5);
    const CountMatrix x = random_counts(6, 5, 40, rng);
    ModelConfig cond;
    cond.covariates = 3;
    for (const std::string kind : {"plntree", "pln"}) {
        CAPTURE(kind);
        auto plain = make_model(kind, tree, {}, 9);
        auto film = make_model(kind, tree, cond, 9);
        const auto noise = plain->draw_noise(6, rng);
        Tape a, b;
        const double e1 = plain->elbo(a, make_model_data(tree, x), noise).value()(0, 0);
        const double e2 = film->elbo(b, make_model_data(tree, x, standard_normal(6, 3, rng)), noise).value()(0, 0);
        CHECK(e1 == e2);
        CHECK(std::isfinite(e1));
    }
    auto film = make_model("plntree", tree, cond, 9);
    Tape t;
    CHECK_THROWS_AS(film->elbo(t, make_model_data(tree, x), film->draw_noise(6, rng)), DataError);
}

TEST_CASE("encoder contracts") {
    Rng rng(7);
    SUBCASE("single level tree") {
        PlnTreeModel model(TaxonomyTree::from_lineages({"A", "B", "C"}), {}, 2);
        const auto data = make_model_data(model.tree(), random_counts(4, 3, 20, rng));
        Tape t;
        const auto d = model.encode(t, data, model.draw_noise(4, rng));
        CHECK(d.z.size() == 1);
        CHECK(d.z[0].cols() == 3);
        CHECK(model.heads[0].hidden.in() == 32 + 3);
    }
    SUBCASE("variances are positive and noise-free draws sit on the mean") {
        const auto tree = two_level();
        PlnTreeModel model(tree, {}, 3);
        const auto data = make_model_data(tree, random_counts(8, 5, 1000, rng));
        std::vector<Matrix> zero{Matrix::Zero(8, 2), Matrix::Zero(8, 5)};
        Tape t;
        const auto d = model.encode(t, data, zero);
        for (int l = 0; l < 2; ++l) {
            CHECK((d.log_variance[l].value().array().exp() > 0).all());
            CHECK((d.z[l].value().array() == d.mean[l].value().array()).all());
        }
    }
    SUBCASE("vanishing variance collapses the draw onto the mean") {
        ModelConfig c;
        c.log_variance_min = -80;
        PlnTreeModel model(TaxonomyTree::from_lineages({"A"}), c, 1);
        freeze_single(model, 0.4, -500.0);
        const auto data = make_model_data(model.tree(), leaf_rows({{0}}));
        Tape t;
        const auto d = model.encode(t, data, {Matrix::Constant(1, 1, 2.5)});
        CHECK(std::abs(d.z[0].value()(0, 0) - 0.4) < 1e-15);
    }
    SUBCASE("posterior draws average to the mean") {
        PlnTreeModel model(TaxonomyTree::from_lineages({"A"}), {}, 1);
        freeze_single(model, 0.7, std::log(0.3));
        const auto data = make_model_data(model.tree(), CountMatrix::Zero(10000, 1));
        Tape t;
        const auto d = model.encode(t, data, model.draw_noise(10000, rng));
        const double mean = d.z[0].value().mean();
        CHECK(std::abs(mean - 0.7) < 4.0 * std::sqrt(0.3 / 10000.0));
    }
}

TEST_CASE("ELBO against one-dimensional references") {
    PlnTreeModel model(TaxonomyTree::from_lineages({"A"}), {}, 1);
    const auto data = make_model_data(model.tree(), leaf_rows({{0}}));
    freeze_single(model, 0.0, 0.0);  // q = prior = N(0, 1)
    Rng rng(8);
    // log p(z) - log q(z) vanishes draw by draw
    const auto big = data.replicate(2000);
    Tape t;
    const auto d = model.encode(t, big, model.draw_noise(2000, rng));
    const Matrix kl = (model.log_prior(t, d.z, big.covariates) - d.log_q).value();
    CHECK(kl.cwiseAbs().maxCoeff() < 1e-12);

    // MC estimate of E[-e^Z] = -e^{1/2}
    const auto many = data.replicate(100000);
    Tape t2;
    const auto d2 = model.encode(t2, many, model.draw_noise(100000, rng));
    const Matrix per_row = (model.log_prior(t2, d2.z, many.covariates) + model.log_emission(t2, d2.z, many) - d2.log_q).value();
    const double mean = per_row.mean();
    const double se = std::sqrt((per_row.array() - mean).square().sum() / (100000.0 - 1.0) / 100000.0);
    CHECK(std::abs(mean + std::exp(0.5)) < 3 * se);
}

TEST_CASE("ELBO gradient matches finite differences") {
    const auto tree = TaxonomyTree::from_lineages({"A|x", "A|y", "B|z", "B|w"});
    ModelConfig c;
    c.gru_hidden = 6;
    c.head_width = 5;
    c.covariates = 2;
    PlnTreeModel model(tree, c, 4);
    Rng rng(9);
    const auto data = make_model_data(tree, random_counts(3, 4, 6, rng), standard_normal(3, 2, rng));
    // break the identity start of the FiLM heads so they get exercised
    for (auto* p : model.parameters())
        if (p->name.find("film") != std::string::npos) p->value = 0.3 * standard_normal(p->value.rows(), p->value.cols(), rng);
    const auto noise = model.draw_noise(3, rng);
    auto build = [&](Tape& t) { return model.elbo(t, data, noise); };
    // step 1e-4: the ELBO is O(10) so a smaller step lets roundoff swamp the
    // weakest coordinates
    const auto r = ad::finite_difference_check(build, model.parameters(), 200, 1e-4, rng);
    CHECK(r.max_relative_error < 1e-4);

    PlnModel flat(tree, c, 4);
    for (auto* p : flat.parameters())
        if (p->name.find("film") != std::string::npos) p->value = 0.3 * standard_normal(p->value.rows(), p->value.cols(), rng);
    const auto flat_noise = flat.draw_noise(3, rng);
    auto flat_build = [&](Tape& t) { return flat.elbo(t, data, flat_noise); };
    CHECK(ad::finite_difference_check(flat_build, flat.parameters(), 200, 1e-4, rng).max_relative_error < 1e-4);
}

TEST_CASE("decoding") {
    const auto tree = two_level();
    PlnTreeModel model(tree, {}, 1);
    Rng rng(10);
    SUBCASE("very negative top latents give all zero counts") {
        const auto x = model.decode({Matrix::Constant(5, 2, -800), standard_normal(5, 5, rng)}, rng);
        for (const auto& m : x) CHECK(m.isZero());
    }
    SUBCASE("chains pass counts through") {
        PlnTreeModel chain(TaxonomyTree::from_lineages({"A|a|x", "B|b|y"}), {}, 1);
        const auto x = chain.decode({Matrix::Constant(20, 2, 3.0), standard_normal(20, 2, rng), standard_normal(20, 2, rng)}, rng);
        CHECK(x[0] == x[1]);
        CHECK(x[1] == x[2]);
    }
    SUBCASE("equal logits split a large parent evenly on average") {
        PlnTreeModel pair(TaxonomyTree::from_lineages({"A|x", "A|y"}), {}, 1);
        const int draws = 400;
        Matrix z0 = Matrix::Constant(draws, 1, std::log(1e5));
        double total_parent = 0, total_child = 0;
        const auto x = pair.decode({z0, Matrix::Zero(draws, 2)}, rng);
        for (int i = 0; i < draws; ++i) {
            total_parent += static_cast<double>(x[0](i, 0));
            total_child += static_cast<double>(x[1](i, 0));
        }
        // binomial(N_i, 1/2) given the parents
        const double se = std::sqrt(total_parent * 0.25);
        CHECK(std::abs(total_child - 0.5 * total_parent) < 3 * se);
    }
    SUBCASE("every posterior and prior sample is an exact hierarchy") {
        const auto data = make_model_data(tree, random_counts(50, 5, 500, rng));
        model.initialize_from_data(data);
        CHECK_FALSE(validate_levels(tree, model.sample_posterior(data, rng)).has_value());
        CHECK_FALSE(validate_levels(tree, model.sample_prior(300, Matrix(), rng)).has_value());
    }
}

TEST_CASE("training contracts") {
    const auto tree = two_level();
    Rng rng(11);
    PlnTreeModel truth(tree, {}, 77);
    truth.top_mean.value << 4.0, 5.0;
    const auto sim = truth.sample_prior(200, Matrix(), rng);
    const auto data = make_model_data(tree, sim.back());
    ModelConfig mc;
    mc.gru_hidden = 8;
    mc.head_width = 8;
    TrainConfig tc;
    tc.epochs = 0;
    tc.seed = 5;

    auto zero = fit_model("plntree", tree, data, mc, tc);
    auto fresh = make_model("plntree", tree, mc, derive_seed(5, "init"));
    fresh->initialize_from_data(data);
    CHECK(zero.result.elbo_trace.empty());
    const auto a = zero.model->parameters();
    const auto b = fresh->parameters();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK((a[i]->value.array() == b[i]->value.array()).all());

    tc.epochs = 300;
    auto r1 = fit_model("plntree", tree, data, mc, tc);
    auto r2 = fit_model("plntree", tree, data, mc, tc);
    REQUIRE(r1.result.elbo_trace.size() == 300);
    for (std::size_t i = 0; i < 300; ++i) CHECK(r1.result.elbo_trace[i] == r2.result.elbo_trace[i]);
    const auto smooth = smooth_trace(r1.result.elbo_trace, 50);
    CHECK(smooth.back() > r1.result.elbo_trace.front());

    // mini-batches and several Monte-Carlo draws
    tc.epochs = 3;
    tc.batch_size = 64;
    tc.mc_samples = 2;
    CHECK(fit_model("plntree", tree, data, mc, tc).result.elbo_trace.size() == 3);

    // non-finite losses abort
    auto broken = make_model("plntree", tree, mc, 1);
    for (auto* p : broken->parameters())
        if (p->name == "prior.top_mean") p->value.setConstant(std::nan(""));
    tc.epochs = 1;
    try {
        train(*broken, data, tc);
        CHECK(false);
    } catch (const NumericError& e) {
        CHECK(e.code() == "NonFiniteLoss");
    }
}

TEST_CASE("flat PLN") {
    SUBCASE("one taxon agrees with a one-level tree") {
        const auto tree = TaxonomyTree::from_lineages({"A"});
        PlnModel flat(tree, {}, 1);
        PlnTreeModel deep(tree, {}, 1);
        const auto data = make_model_data(tree, leaf_rows({{7}, {0}}));
        Tape t;
        const Matrix z = (Matrix(2, 1) << 1.3, -0.4).finished();
        CHECK((flat.log_emission(t, {t.constant(z)}, data).value().array() ==
               deep.log_emission(t, {t.constant(z)}, data).value().array())
                  .all());
    }
    SUBCASE("fitted mean recovers the simulated log intensity") {
        const auto tree = TaxonomyTree::from_lineages({"A|x", "A|y", "B|z"});
        Rng rng(12);
        const Eigen::RowVector3d mu(2.0, 3.5, 1.0);
        Eigen::Matrix3d l;
        l << 0.6, 0, 0, 0.3, 0.5, 0, -0.2, 0.1, 0.7;
        const Matrix z = (standard_normal(2000, 3, rng) * l.transpose()).rowwise() + mu;
        CountMatrix x(2000, 3);
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            std::poisson_distribution<std::int64_t> p(std::exp(z.data()[i]));
            x.data()[i] = p(rng);
        }
        ModelConfig mc;
        TrainConfig tc;
        tc.epochs = 400;
        tc.seed = 3;
        auto fit = fit_model("pln", tree, make_model_data(tree, x), mc, tc);
        const auto& pln = dynamic_cast<const PlnModel&>(*fit.model);
        CAPTURE(pln.mean.value);
        CHECK((pln.mean.value.row(0) - mu).cwiseAbs().maxCoeff() < 0.1);
        // samples have leaves only; coarser levels come from aggregation
        const auto s = pln.sample_prior(10, Matrix(), rng);
        CHECK(s.size() == 2);
        CHECK_FALSE(validate_levels(tree, s).has_value());
    }
}

TEST_CASE("checkpoints round trip") {
    const auto tree = two_level();
    Rng rng(13);
    ModelConfig mc;
    mc.covariates = 2;
    for (const std::string kind : {"plntree", "pln"}) {
        auto model = make_model(kind, tree, mc, 4);
        for (auto* p : model->parameters()) p->value += 0.01 * standard_normal(p->value.rows(), p->value.cols(), rng);
        TrainConfig tc;
        tc.epochs = 17;
        const auto doc = checkpoint_json(*model, {1.0, 2.5}, "CRC", tc);
        const auto back = load_checkpoint(nlohmann::json::parse(doc.dump()));
        CHECK(back.label == "CRC");
        CHECK(back.trace == std::vector<double>{1.0, 2.5});
        CHECK(back.train_config.epochs == 17);
        CHECK(back.model->kind() == kind);
        const auto data = make_model_data(tree, random_counts(4, 5, 9, rng), standard_normal(4, 2, rng));
        const auto noise = model->draw_noise(4, rng);
        Tape a, b;
        CHECK(model->elbo(a, data, noise).value()(0, 0) == back.model->elbo(b, data, noise).value()(0, 0));
        CHECK(checkpoint_json(*back.model, back.trace, back.label, back.train_config).dump() == doc.dump());
    }
    nlohmann::json bad = checkpoint_json(*make_model("pln", tree, {}, 1), {}, "x", {});
    bad["taxonomy_hash"] = "0000000000000000";
    CHECK_THROWS_AS(load_checkpoint(bad), DataError);
}
