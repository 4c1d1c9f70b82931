#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "taxapln/cli.hpp"
#include "taxapln/config.hpp"
#include "taxapln/error.hpp"

using namespace taxapln;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kToy = TAXAPLN_SOURCE_DIR "/data/toy/config.json";

struct Outcome {
    int code;
    std::string out, err;
};

Outcome cli(std::vector<std::string> args) {
    args.insert(args.begin(), "taxapln");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::path(TAXAPLN_BINARY_DIR) / "cli_scratch" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::size_t lines(const fs::path& p) {
    const std::string s = slurp(p);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST_CASE("config round trip") {
    const RunConfig toy = load_run_config(kToy);
    const json once = toy;
    const json twice = once.get<RunConfig>();
    CHECK(once == twice);

    const RunConfig d;
    CHECK(d.prevalence == 0.15);
    CHECK(d.total_count == 100000);
    CHECK(d.train.learning_rate == 1e-3);
    CHECK(d.train.clip_norm == 5.0);
    CHECK(d.train.batch_size == 512);
    CHECK(d.beta == 2.0);
    CHECK(d.cv.repeats == 25);
    CHECK(d.cv.folds == 5);
    CHECK(d.diversity.samples == 500);
    CHECK(d.cv.mlp.hidden == std::vector<int>{256, 128});

    json bad = once;
    bad["epochs"] = 5;
    CHECK_THROWS_AS(bad.get<RunConfig>(), ConfigError);
    RunConfig cond = toy;
    cond.metadata.clear();
    cond.conditional = true;
    CHECK_THROWS_AS(validate(cond), ConfigError);
}

TEST_CASE("fit writes one checkpoint per label and is reproducible") {
    const auto a = scratch("fit_a"), b = scratch("fit_b");
    const auto ra = cli({"fit", "--config", kToy, "--out", a.string(), "--epochs", "30"});
    REQUIRE(ra.code == 0);
    CHECK(fs::exists(a / "checkpoint_0.json"));
    CHECK(fs::exists(a / "checkpoint_1.json"));
    CHECK_FALSE(fs::exists(a / "checkpoint_2.json"));
    CHECK(lines(a / "trace.csv") == 1 + 2 * 30);
    CHECK(fs::exists(a / "config.json"));
    REQUIRE(cli({"fit", "--config", kToy, "--out", b.string(), "--epochs", "30", "--jobs", "2"}).code == 0);
    const auto ma = read_json(a / "fit_manifest.json"), mb = read_json(b / "fit_manifest.json");
    CHECK(ma["models"] == mb["models"]);
    CHECK(slurp(a / "checkpoint_1.json") == slurp(b / "checkpoint_1.json"));

    // a different seed moves the fit
    const auto c = scratch("fit_c");
    REQUIRE(cli({"fit", "--config", kToy, "--out", c.string(), "--epochs", "30", "--seed", "8"}).code == 0);
    CHECK(read_json(c / "fit_manifest.json")["models"] != ma["models"]);
}

TEST_CASE("conditional fit without metadata is a config error") {
    const auto dir = scratch("cond");
    RunConfig c = load_run_config(kToy);
    json j = c;
    j["abundance"] = fs::absolute(c.abundance_path()).string();
    j["metadata"] = "";
    j["conditional"] = true;
    std::ofstream(dir / "config.json") << j.dump();
    const auto r = cli({"fit", "--config", (dir / "config.json").string(), "--out", (dir / "out").string()});
    CHECK(r.code == 2);
    const auto err = json::parse(r.err);
    CHECK(err["error"]["category"] == "config");
    CHECK(err["error"]["code"] == "MissingMetadata");
}

TEST_CASE("augment") {
    const auto fit = scratch("aug_fit");
    REQUIRE(cli({"fit", "--config", kToy, "--out", fit.string(), "--epochs", "20"}).code == 0);

    const auto two = scratch("aug_two");
    REQUIRE(cli({"augment", "--config", kToy, "--out", two.string(), "--checkpoints", fit.string()}).code == 0);
    const auto m = read_json(two / "manifest.json");
    CHECK(m["original_rows"] == 100);
    CHECK(m["synthetic_rows"] == 100);
    CHECK(m["synthetic_per_label"]["0"] == 55);
    CHECK(m["synthetic_per_label"]["1"] == 45);
    CHECK(m["models"].size() == 2);
    CHECK(lines(two / "augmented.tsv") == 1 + 200);
    CHECK(lines(two / "provenance.csv") == 1 + 100);

    const auto one = scratch("aug_one");
    REQUIRE(cli({"augment", "--config", kToy, "--out", one.string(), "--beta", "1", "--strategy", "mixup"}).code == 0);
    CHECK(read_json(one / "manifest.json")["synthetic_rows"] == 0);
    CHECK(lines(one / "provenance.csv") == 1);

    // checkpoints of another family are refused
    const auto pln = scratch("aug_pln");
    const auto r = cli({"augment", "--config", kToy, "--out", pln.string(), "--strategy", "pln", "--checkpoints", fit.string()});
    CHECK(r.code == 2);
    CHECK(json::parse(r.err)["error"]["code"] == "CheckpointMismatch");
}

TEST_CASE("diversity report files") {
    const auto dir = scratch("diversity");
    RunConfig c = load_run_config(kToy);
    json j = c;
    j["abundance"] = fs::absolute(c.abundance_path()).string();
    j["metadata"] = fs::absolute(c.metadata_path()).string();
    j["diversity"]["strategies"] = {"copy", "mixup"};
    j["diversity"]["samples"] = 60;
    std::ofstream(dir / "config.json") << j.dump();
    REQUIRE(cli({"diversity", "--config", (dir / "config.json").string(), "--out", (dir / "out").string()}).code == 0);
    const auto report = read_json(dir / "out" / "diversity.json");
    REQUIRE(report["strategies"].size() == 2);
    // 2 strategies x 2 metrics x (100 original + 60 synthetic) rows
    CHECK(lines(dir / "out" / "pcoa.csv") == 1 + 2 * 2 * 160);
    const double ks = report["strategies"][0]["shannon"]["ks"].get<double>();
    CHECK(ks < 0.2);  // copies of real rows
}

TEST_CASE("gradcheck exit codes") {
    const auto dir = scratch("gradcheck");
    const auto ok = cli({"gradcheck", "--config", kToy, "--out", (dir / "ok").string()});
    CHECK(ok.code == 0);
    CHECK(read_json(dir / "ok" / "gradcheck.json")["max_relative_error"].get<double>() < 1e-4);
    const auto bad = cli({"gradcheck", "--config", kToy, "--out", (dir / "bad").string(), "--corrupt"});
    CHECK(bad.code == 4);
    CHECK(read_json(dir / "bad" / "gradcheck.json")["max_relative_error"].get<double>() > 1e-2);
    CHECK(json::parse(bad.err)["error"]["code"] == "GradientMismatch");
}

TEST_CASE("argument and input errors") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"nonsense"}).code == 2);
    CHECK(cli({"fit"}).code == 2);
    const auto dir = scratch("errors");
    std::ofstream(dir / "config.json") << R"({"abundance": "missing.tsv"})";
    const auto r = cli({"fit", "--config", (dir / "config.json").string(), "--out", (dir / "out").string()});
    CHECK(r.code == 3);
    CHECK(json::parse(r.err)["error"]["category"] == "data");
    CHECK(cli({"fit", "--config", kToy, "--jobs", "0"}).code == 2);
    CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("simulate is reproducible") {
    const auto a = scratch("sim_a"), b = scratch("sim_b");
    REQUIRE(cli({"simulate", "--out", a.string(), "--seed", "3"}).code == 0);
    REQUIRE(cli({"simulate", "--out", b.string(), "--seed", "3"}).code == 0);
    CHECK(slurp(a / "abundance.tsv") == slurp(b / "abundance.tsv"));
    CHECK(slurp(a / "metadata.csv") == slurp(b / "metadata.csv"));
    // the written config runs the pipeline on the written files
    const RunConfig replay = load_run_config(a / "config.json");
    CHECK(fs::exists(replay.abundance_path()));
    CHECK(fs::exists(replay.metadata_path()));
}
