#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "taxapln/error.hpp"
#include "taxapln/ingest.hpp"

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

AbundanceTable relative_table(const Eigen::MatrixXd& v) {
    AbundanceTable t;
    t.values = v;
    for (Eigen::Index i = 0; i < v.rows(); ++i) t.sample_ids.push_back("s" + std::to_string(i));
    for (Eigen::Index j = 0; j < v.cols(); ++j) t.taxa_lineages.push_back("A|t" + std::to_string(j));
    return t;
}

}  // namespace

TEST_CASE("loading abundance tables") {
    std::istringstream ok("taxon\ts1\ts2\nA|a|x\t0.2\t0.5\nA|a|y\t0.3\t0.25\nA|b|z\t0.5\t0.25\n");
    const auto t = load_abundance_table(ok);
    CHECK(t.kind == AbundanceKind::relative);
    CHECK(t.values.rows() == 2);
    CHECK(t.values.cols() == 3);
    CHECK(t.sample_ids == std::vector<std::string>{"s1", "s2"});
    CHECK(t.values(1, 0) == 0.5);

    // transposed, comma separated
    std::istringstream rows("sample,A|x,A|y\ns1,0.4,0.6\n");
    TableReadOptions o;
    o.samples_in_rows = true;
    CHECK(load_abundance_table(rows, o).values(0, 1) == 0.6);

    std::istringstream neg("taxon\ts1\nA|x\t-0.1\nA|y\t1.1\n");
    CHECK(code_of([&] { load_abundance_table(neg); }) == "NegativeValue");
    std::istringstream sum("taxon\ts1\nA|x\t0.4\nA|y\t0.5\n");
    CHECK(code_of([&] { load_abundance_table(sum); }) == "RowSumViolation");
    std::istringstream text("taxon\ts1\nA|x\tabc\nA|y\t1\n");
    CHECK(code_of([&] { load_abundance_table(text); }) == "NonNumericCell");

    // small drift is renormalised
    std::istringstream drift("taxon\ts1\nA|x\t0.5004\nA|y\t0.5\n");
    const auto d = load_abundance_table(drift);
    CHECK(std::abs(d.values.row(0).sum() - 1.0) < 1e-12);
}

TEST_CASE("count tables round trip") {
    AbundanceTable t = relative_table((Eigen::MatrixXd(2, 2) << 3, 4, 0, 9).finished());
    t.kind = AbundanceKind::counts;
    std::ostringstream out;
    write_abundance_table(out, t);
    std::istringstream in(out.str());
    TableReadOptions o;
    o.kind = AbundanceKind::counts;
    const auto back = load_abundance_table(in, o);
    CHECK(back.values == t.values);
    CHECK(back.taxa_lineages == t.taxa_lineages);
}

TEST_CASE("prevalence filter") {
    Eigen::MatrixXd v = Eigen::MatrixXd::Zero(100, 3);
    v.col(0).setConstant(1.0);
    for (int i = 0; i < 14; ++i) v(i, 1) = 1.0;
    for (int i = 0; i < 15; ++i) v(i, 2) = 1.0;
    AbundanceTable t = relative_table(v);
    t.values = to_proportions(v);
    const auto f = prevalence_filter(t, 0.15);
    CHECK(f.taxa_lineages == std::vector<std::string>{"A|t0", "A|t2"});
    for (Eigen::Index i = 0; i < f.values.rows(); ++i) CHECK(std::abs(f.values.row(i).sum() - 1.0) < 1e-12);

    const auto id = prevalence_filter(t, 0.0);
    CHECK(id.values == t.values);

    // monotone in the threshold
    Rng rng(4);
    std::bernoulli_distribution present(0.3);
    Eigen::MatrixXd r(60, 25);
    for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = present(rng) ? 1.0 : 0.0;
    r.col(0).setConstant(1.0);
    AbundanceTable rt = relative_table(r);
    rt.kind = AbundanceKind::counts;
    std::size_t last = 26;
    for (double th = 0.0; th <= 1.0; th += 0.05) {
        const auto kept = prevalence_filter(rt, th).taxa_lineages.size();
        CHECK(kept <= last);
        last = kept;
    }

    Eigen::MatrixXd none = Eigen::MatrixXd::Zero(10, 2);
    none(0, 0) = none(1, 1) = 1.0;
    AbundanceTable nt = relative_table(none);
    nt.kind = AbundanceKind::counts;
    CHECK(code_of([&] { prevalence_filter(nt, 0.5); }) == "AllTaxaRemoved");
    CHECK(code_of([&] { prevalence_filter(nt, 1.5); }) == "InvalidThreshold");
}

TEST_CASE("bundled toy cohort keeps the hand-counted columns") {
    std::ifstream in(TAXAPLN_SOURCE_DIR "/data/toy/abundance.tsv");
    REQUIRE(in.good());
    const auto t = load_abundance_table(in);
    const double n = static_cast<double>(t.values.rows());
    std::vector<std::string> expect;
    for (Eigen::Index j = 0; j < t.values.cols(); ++j) {
        int nonzero = 0;
        for (Eigen::Index i = 0; i < t.values.rows(); ++i) nonzero += t.values(i, j) > 0.0;
        if (100 * nonzero >= 15 * n) expect.push_back(t.taxa_lineages[j]);
    }
    const auto f = prevalence_filter(t, 0.15);
    CHECK(f.taxa_lineages == expect);
    CHECK(expect.size() < t.taxa_lineages.size());  // the toy data has rare taxa
}

TEST_CASE("count conversion") {
    Rng rng(1);
    AbundanceTable degenerate = relative_table((Eigen::MatrixXd(1, 3) << 1, 0, 0).finished());
    const auto c = to_counts(degenerate, 100000, rng);
    CHECK(c.kind == AbundanceKind::counts);
    CHECK(c.values(0, 0) == 100000);
    CHECK(c.values(0, 1) == 0);

    Eigen::MatrixXd p(20, 6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
    const auto counts = to_counts(relative_table(to_proportions(p)), 100000, rng);
    for (Eigen::Index i = 0; i < counts.values.rows(); ++i) CHECK(counts.values.row(i).sum() == 100000);

    // binomial moments: mean over 1000 seeds within 3 standard errors
    AbundanceTable half = relative_table((Eigen::MatrixXd(1, 2) << 0.5, 0.5).finished());
    double total = 0.0;
    for (int s = 0; s < 1000; ++s) {
        Rng r(derive_seed(77, "half", {static_cast<std::uint64_t>(s)}));
        total += to_counts(half, 100000, r).values(0, 0);
    }
    const double se = std::sqrt(100000 * 0.25) / std::sqrt(1000.0);
    CHECK(std::abs(total / 1000.0 - 50000.0) < 3 * se);
}

TEST_CASE("counts converge to the proportions") {
    Rng rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Eigen::MatrixXd p(200, 10);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
    const AbundanceTable t = relative_table(to_proportions(p));
    const auto back = to_proportions(to_counts(t, 100000, rng).values);
    CHECK((back - t.values).cwiseAbs().maxCoeff() < 0.01);
}

TEST_CASE("clr and proportions") {
    const Eigen::MatrixXd c = (Eigen::MatrixXd(1, 3) << 5, 5, 5).finished();
    CHECK(clr_transform(c, 0.0).cwiseAbs().maxCoeff() < 1e-15);
    const Eigen::MatrixXd r = (Eigen::MatrixXd(1, 2) << 0, std::exp(1.0) - 1).finished();
    const auto z = clr_transform(r, 1.0);
    CHECK(z(0, 0) == doctest::Approx(-0.5));
    CHECK(z(0, 1) == doctest::Approx(0.5));
    Rng rng(3);
    std::uniform_int_distribution<int> cnt(0, 500);
    CountMatrix m(30, 7);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = cnt(rng);
    const auto w = clr_transform(m);
    for (Eigen::Index i = 0; i < w.rows(); ++i) CHECK(std::abs(w.row(i).sum()) < 1e-9);
    CHECK(code_of([&] { clr_transform(CountMatrix::Zero(1, 2), 0.0); }) == "NonPositiveEntry");

    const Eigen::MatrixXd p = to_proportions((Eigen::MatrixXd(1, 3) << 2, 3, 5).finished());
    CHECK(p(0, 0) == doctest::Approx(0.2));
    CHECK(p(0, 2) == doctest::Approx(0.5));
    CHECK((to_proportions(p) - p).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(code_of([&] { to_proportions(Eigen::MatrixXd::Zero(1, 3)); }) == "ZeroRow");
}

TEST_CASE("covariate encoding") {
    std::istringstream csv(
        "sample_id,age,sex,bmi,country,label\n"
        "a,adult,F,18,FR,x\n"
        "b,senior,M,25,US,y\n"
        "c,child,F,32,FR,x\n");
    const auto meta = load_metadata(csv);
    const CovariateEncoder enc(default_covariate_schema(), meta);
    const auto m = enc.transform(meta);
    REQUIRE(m.values.cols() == enc.width());
    // age, sex, bmi, country=FR, country=US
    CHECK(m.values.cols() == 5);
    CHECK(m.values(0, 1) == 0.0);
    CHECK(m.values(1, 1) == 1.0);
    CHECK(m.values(0, 2) == 0.0);
    CHECK(m.values(1, 2) == doctest::Approx(0.5));
    CHECK(m.values(2, 2) == 1.0);
    CHECK(m.values.row(0).tail(2) == Eigen::RowVector2d(1, 0));
    CHECK(m.values.row(1).tail(2) == Eigen::RowVector2d(0, 1));
    CHECK(m.values.row(2).tail(2) == Eigen::RowVector2d(1, 0));
    CHECK(m.values(1, 0) > m.values(0, 0));
    CHECK(m.values(0, 0) > m.values(2, 0));

    // frozen statistics on unseen rows
    std::istringstream test_csv(
        "sample_id,age,sex,bmi,country,label\n"
        "d,adult,M,40,DE,x\n");
    const auto t = enc.transform(load_metadata(test_csv));
    CHECK(t.values(0, 2) == 1.0);  // clipped to the training range
    CHECK(t.values.row(0).tail(2).isZero());
    CHECK(t.unknown_category[0]);

    std::istringstream missing(
        "sample_id,age,sex,bmi,country,label\n"
        "e,adult,,20,FR,x\n");
    CHECK(code_of([&] { enc.transform(load_metadata(missing)); }) == "MissingValue");
    std::istringstream odd(
        "sample_id,age,sex,bmi,country,label\n"
        "e,adult,X,20,FR,x\n");
    CHECK(code_of([&] { enc.transform(load_metadata(odd)); }) == "UnknownCategory");
}

TEST_CASE("cohort assembly and labels") {
    std::istringstream ab("taxon\ts1\ts2\ts3\nA|a|x\t0.5\t0.2\t0\nA|a|y\t0.5\t0.3\t0.5\nA|b|z\t0\t0.5\t0.5\n");
    std::istringstream meta(
        "sample_id,age,sex,bmi,country,label\n"
        "s3,adult,F,18,FR,CRC\n"
        "s1,adult,M,25,US,healthy\n"
        "s2,child,F,32,FR,CRC\n");
    Rng rng(1);
    CohortOptions o;
    o.total_count = 1000;
    const auto c = prepare_cohort(ab, &meta, o, rng);
    CHECK(c.size() == 3);
    CHECK(c.tree.layer_sizes() == std::vector<int>{1, 2, 3});
    CHECK(c.label_names == std::vector<std::string>{"CRC", "healthy"});
    CHECK(c.labels == std::vector<int>{1, 0, 0});
    CHECK(c.metadata->cell("bmi", 0) == "25");
    for (Eigen::Index i = 0; i < 3; ++i) CHECK(c.counts.row(i).sum() == 1000);

    const auto [codes, names] = encode_labels({"10", "2", "10"});
    CHECK(names == std::vector<std::string>{"2", "10"});
    CHECK(codes == std::vector<int>{1, 0, 1});
}
