#include "support.hpp"

#include "tokenprune/checkpoint.hpp"
#include "tokenprune/cli.hpp"
#include "tokenprune/errors.hpp"
#include "tokenprune/pipeline.hpp"
#include "tokenprune/strategies.hpp"

#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace tptest;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result tp(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    Result r;
    r.code = cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path out_path(const std::string& rel) { return fs::path(cli::resolve_output(rel)); }

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            cells.push_back(cell);
        }
        rows.push_back(cells);
    }
    return rows;
}

// Small model settings shared by the training commands.
const std::vector<std::string> kSmall{"--set", "num_layers=3", "--set", "hidden=8",        "--set",
                                      "heads=2", "--set", "ffn_inner=16", "--set", "reduction_positions=1,2",
                                      "--set", "batch_size=8", "--set", "num_action_samples=2", "--epochs", "1"};

std::vector<std::string> with_small(std::vector<std::string> args) {
    args.insert(args.end(), kSmall.begin(), kSmall.end());
    return args;
}

const std::string& small_data() {
    static const std::string path = [] {
        const auto r = tp({"generate", "--task", "keyword", "--seed", "3", "--n", "80", "--seq-min", "8", "--seq-max",
                           "16", "--vocab", "64", "--out", "data/small.jsonl"});
        REQUIRE(r.code == 0);
        return out_path("data/small.jsonl").string();
    }();
    return path;
}

const std::string& trained_run() {
    static const std::string dir = [] {
        const auto r = tp(with_small({"train", "--data", small_data(), "--out", "runs/full"}));
        REQUIRE(r.code == 0);
        return out_path("runs/full").string();
    }();
    return dir;
}

} // namespace

TEST_CASE("output root") {
    CHECK(cli::output_root() != ".");
    CHECK(cli::resolve_output("/abs/x") == "/abs/x");
    CHECK(cli::resolve_output("rel/x") == (fs::path(cli::output_root()) / "rel/x").string());
}

TEST_CASE("usage errors") {
    CHECK(tp({}).code == cli::kUsage);
    CHECK(tp({"generate"}).code == cli::kUsage);
    CHECK(tp({"generate", "--task", "poetry"}).code == cli::kUsage);
    CHECK(tp({"frobnicate"}).code == cli::kUsage);
    CHECK(tp({"eval", "--data", "x.jsonl"}).code == cli::kUsage);
    CHECK(tp({"--help"}).code == cli::kOk);
    CHECK(tp({"generate", "--task", "keyword", "--signal", "0", "--n", "2", "--out", "data/bad.jsonl"}).code ==
          cli::kUsage);
}

TEST_CASE("generate is deterministic and round-trips") {
    for (const std::string task : {"keyword", "span"}) {
        const auto a = tp({"generate", "--task", task, "--seed", "7", "--n", "50", "--out", "gen/a-" + task + ".jsonl"});
        const auto b = tp({"generate", "--task", task, "--seed", "7", "--n", "50", "--out", "gen/b-" + task + ".jsonl"});
        REQUIRE(a.code == 0);
        REQUIRE(b.code == 0);
        const auto pa = out_path("gen/a-" + task + ".jsonl");
        CHECK(slurp(pa) == slurp(out_path("gen/b-" + task + ".jsonl")));
        CHECK(fs::exists(pa.string() + ".config"));
        const auto data = synthetic::load_dataset(pa.string());
        CHECK(data.size() == 50);
        std::ostringstream again;
        synthetic::write_jsonl(again, data);
        CHECK(again.str() == slurp(pa));
    }
    const auto c = tp({"generate", "--task", "keyword", "--seed", "8", "--n", "50", "--out", "gen/c.jsonl"});
    REQUIRE(c.code == 0);
    CHECK(slurp(out_path("gen/c.jsonl")) != slurp(out_path("gen/a-keyword.jsonl")));
}

TEST_CASE("experiment config") {
    cli::ExperimentConfig cfg;
    cfg.apply("hidden", "16");
    cfg.apply("lambda", "0.25");
    cfg.apply("dev_fraction", "0.2");
    CHECK(cfg.model.hidden == 16);
    CHECK(cfg.train.lambda == 0.25);
    CHECK_THROWS_AS(cfg.apply("hiddn", "16"), ParameterError);
    CHECK_THROWS_AS(cfg.apply("dev_fraction", "1.5"), ParameterError);
    cli::ExperimentConfig back;
    back.apply(cfg.to_key_values());
    CHECK(back.to_key_values() == cfg.to_key_values());
    CHECK(parse_key_values(format_key_values(cfg.to_key_values())) == cfg.to_key_values());
}

TEST_CASE("split and shape adoption") {
    synthetic::KeywordParams p;
    p.n_examples = 10;
    const auto data = synthetic::gen_keyword_task(p);
    const auto [train, dev] = cli::split_dataset(data, 0.25);
    CHECK(train.size() == 7);
    CHECK(dev.size() == 3);
    CHECK(dev.examples[0].tokens == data.examples[7].tokens);
    CHECK_THROWS_AS(cli::split_dataset(data, 0.0), InputError);
    ModelConfig m;
    m.vocab_size = 3;
    cli::adopt_dataset_shape(m, data);
    CHECK(m.vocab_size == 256);
    CHECK(m.num_classes == 4);
    CHECK(m.head_kind == HeadKind::classification);
}

TEST_CASE("train writes checkpoint, history and resolved config") {
    const fs::path dir = trained_run();
    CHECK(fs::exists(dir / "checkpoint.tprn"));
    CHECK(fs::exists(dir / "config.txt"));
    const auto kv = parse_key_values(slurp(dir / "config.txt"));
    CHECK(kv.at("hidden") == "8");
    CHECK(kv.at("data_path") == small_data());
    const auto ck = checkpoint::load((dir / "checkpoint.tprn").string());
    CHECK(ck.state.stage == 4);
    std::istringstream hist(slurp(dir / "history.jsonl"));
    std::string line;
    std::vector<pipeline::HistoryRecord> records;
    while (std::getline(hist, line)) {
        records.push_back(pipeline::HistoryRecord::from_json(nlohmann::json::parse(line)));
    }
    REQUIRE(records.size() == 3);
    CHECK(records.back().stage == 3);
}

TEST_CASE("eval") {
    const fs::path dir = trained_run();
    const std::string ck = (dir / "checkpoint.tprn").string();

    const auto full = tp({"eval", "--checkpoint", ck, "--data", small_data(), "--mode", "full", "--out", "eval/full"});
    REQUIRE(full.code == 0);
    const auto jf = nlohmann::json::parse(slurp(out_path("eval/full/eval.json")));
    CHECK(jf.at("flops_speedup").get<double>() == 1.0);

    const auto greedy = tp({"eval", "--checkpoint", ck, "--data", small_data(), "--split", "dev", "--out", "eval/greedy"});
    REQUIRE(greedy.code == 0);
    const auto jg = nlohmann::json::parse(slurp(out_path("eval/greedy/eval.json")));
    const auto loaded = checkpoint::load(ck);
    CHECK(jg.at("metric").get<double>() == loaded.state.history.back().dev_metric);
    CHECK(jg.at("flops_speedup").get<double>() == loaded.state.history.back().flops_speedup);

    // Per-example rows add up to the reported totals.
    const auto rows = read_csv(out_path("eval/greedy/flops.csv"));
    REQUIRE(rows.size() == 1 + jg.at("examples").get<std::size_t>());
    CHECK(rows[0] == std::vector<std::string>{"example_id", "orig_len", "flops", "reference_flops", "speedup"});
    std::uint64_t flops = 0, reference = 0;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        flops += std::stoull(rows[i][2]);
        reference += std::stoull(rows[i][3]);
    }
    CHECK(flops == jg.at("flops").get<std::uint64_t>());
    CHECK(reference == jg.at("reference_flops").get<std::uint64_t>());
    CHECK(fs::exists(out_path("eval/greedy/config.txt")));

    CHECK(tp({"eval", "--checkpoint", "missing.tprn", "--data", small_data()}).code == cli::kDataError);
    CHECK(tp({"eval", "--checkpoint", ck, "--data", "missing.jsonl"}).code == cli::kDataError);
}

TEST_CASE("stage-by-stage training keeps the freeze contract") {
    REQUIRE(tp(with_small({"train", "--data", small_data(), "--out", "runs/s1", "--stage", "1"})).code == 0);
    const auto s1 = checkpoint::load(out_path("runs/s1/checkpoint.tprn").string());
    CHECK(s1.state.stage == 2);
    REQUIRE(tp({"train", "--data", small_data(), "--out", "runs/s2", "--stage", "2", "--from",
                out_path("runs/s1/checkpoint.tprn").string()})
                .code == 0);
    const auto s2 = checkpoint::load(out_path("runs/s2/checkpoint.tprn").string());
    CHECK(s2.state.stage == 3);
    CHECK(pipeline::non_policy_hash(s2.state.model) == pipeline::non_policy_hash(s1.state.model));

    // Stage 3 straight from a stage-1 checkpoint is refused.
    CHECK(tp({"train", "--data", small_data(), "--out", "runs/s3", "--stage", "3", "--from",
              out_path("runs/s1/checkpoint.tprn").string()})
              .code == cli::kDataError);
    CHECK(tp({"train", "--data", small_data(), "--out", "runs/s3b", "--stage", "2"}).code == cli::kDataError);
}

TEST_CASE("interrupted training resumes to the same checkpoint") {
    const fs::path whole = trained_run();
    REQUIRE(tp(with_small({"train", "--data", small_data(), "--out", "runs/pieces", "--max-epochs", "2"})).code == 0);
    const auto partial = checkpoint::load(out_path("runs/pieces/checkpoint.tprn").string());
    CHECK(partial.state.stage == 3); // one epoch each of stages 1 and 2
    CHECK(partial.state.history.size() == 2);
    REQUIRE(tp({"train", "--data", small_data(), "--out", "runs/pieces", "--resume"}).code == 0);
    CHECK(slurp(out_path("runs/pieces/checkpoint.tprn")) == slurp(whole / "checkpoint.tprn"));
    CHECK(slurp(out_path("runs/pieces/history.jsonl")) == slurp(whole / "history.jsonl"));

    // Changing the architecture on resume is a data error.
    CHECK(tp({"train", "--data", small_data(), "--out", "runs/pieces", "--resume", "--set", "hidden=16"}).code ==
          cli::kDataError);
}

TEST_CASE("exit codes for bad settings and divergence") {
    CHECK(tp(with_small({"train", "--data", small_data(), "--out", "runs/bad", "--set", "hiddn=3"})).code == cli::kUsage);
    auto odd_heads = with_small({"train", "--data", small_data(), "--out", "runs/bad"});
    odd_heads.insert(odd_heads.end(), {"--set", "heads=3"});
    CHECK(tp(odd_heads).code == cli::kUsage);
    CHECK(tp(with_small({"train", "--data", "nope.jsonl", "--out", "runs/bad"})).code == cli::kDataError);
    const auto div = tp(with_small({"train", "--data", small_data(), "--out", "runs/div", "--set", "divergence_factor=1e-9"}));
    CHECK(div.code == cli::kDivergence);
    CHECK(div.err.find("divergence") != std::string::npos);

    fs::create_directories(out_path("cfg"));
    std::ofstream(out_path("cfg/bad.txt")) << "lambda=0.1\nunknown_key=1\n";
    CHECK(tp(with_small({"train", "--data", small_data(), "--out", "runs/bad", "--config", out_path("cfg/bad.txt").string()}))
              .code == cli::kUsage);
}

TEST_CASE("single-lambda sweep reproduces train and eval") {
    const fs::path whole = trained_run();
    const auto r = tp(with_small({"sweep", "--data", small_data(), "--out", "sweep/one", "--lambdas", "0.01"}));
    REQUIRE(r.code == 0);
    const auto swept = checkpoint::load(out_path("sweep/one/seed1/lambda0.01/checkpoint.tprn").string());
    const auto trained = checkpoint::load((whole / "checkpoint.tprn").string());
    CHECK(pipeline::non_policy_hash(swept.state.model) == pipeline::non_policy_hash(trained.state.model));
    CHECK(slurp(out_path("sweep/one/seed1/lambda0.01/checkpoint.tprn")) == slurp(whole / "checkpoint.tprn"));

    REQUIRE(tp({"eval", "--checkpoint", (whole / "checkpoint.tprn").string(), "--data", small_data(), "--split", "dev",
                "--out", "sweep/one-eval"})
                .code == 0);
    const auto ev = nlohmann::json::parse(slurp(out_path("sweep/one-eval/eval.json")));
    const auto rows = read_csv(out_path("sweep/one/curve.csv"));
    REQUIRE(rows.size() == 2);
    CHECK(std::stod(rows[1][1]) == doctest::Approx(ev.at("metric").get<double>()).epsilon(1e-9));
    CHECK(std::stod(rows[1][2]) == doctest::Approx(ev.at("flops_speedup").get<double>()).epsilon(1e-9));
}

TEST_CASE("strategy sweep matches the strategies module") {
    const std::string s1 = out_path("runs/s1/checkpoint.tprn").string();
    if (!fs::exists(s1)) {
        REQUIRE(tp(with_small({"train", "--data", small_data(), "--out", "runs/s1", "--stage", "1"})).code == 0);
    }
    const auto r = tp(with_small({"sweep", "--data", small_data(), "--out", "sweep/strat", "--strategies",
                                  "random,attention,residual", "--keep-ratios", "0.2,1", "--checkpoint", s1}));
    REQUIRE(r.code == 0);
    const auto ck = checkpoint::load(s1);
    const auto [train, dev] = cli::split_dataset(synthetic::load_dataset(small_data()), 0.1);
    const auto rows = read_csv(out_path("sweep/strat/strategies.csv"));
    REQUIRE(rows.size() == 7);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        strategies::EliminationOptions o;
        o.strategy = strategies::parse_strategy(rows[i][0]);
        o.keep_ratio = std::stod(rows[i][1]);
        o.seed = 1;
        const auto direct = strategies::theoretical_elimination_eval(ck.state.model, dev, o);
        CHECK(std::stod(rows[i][2]) == doctest::Approx(direct.metric).epsilon(1e-9));
        CHECK(std::stod(rows[i][3]) == doctest::Approx(direct.flops_speedup).epsilon(1e-9));
    }
    CHECK(tp(with_small({"sweep", "--data", small_data(), "--out", "sweep/none"})).code == cli::kUsage);
}

TEST_CASE("case study") {
    const fs::path dir = trained_run();
    auto ck = checkpoint::load((dir / "checkpoint.tprn").string());

    const auto r = tp({"case-study", "--checkpoint", (dir / "checkpoint.tprn").string(), "--data", small_data(),
                       "--index", "3", "--out", "case/trained"});
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(slurp(out_path("case/trained/case_study.json")));
    const auto counts = j.at("tag_counts").get<std::vector<std::size_t>>();
    const auto data = synthetic::load_dataset(small_data());
    const auto& ex = data.examples[3];
    // Tag counts are the survivor-count differences across modules.
    const auto gate = reduction::policy_gate(ck.state.model, reduction::DecisionMode::greedy, nullptr,
                                             ck.train_config.greedy_threshold);
    const auto trace = reduction::reduced_forward(ck.state.model, ex.tokens, gate);
    REQUIRE(counts.size() == 3);
    const auto& mods = trace.plan.modules;
    CHECK(counts[0] == mods[0].survivors_in.size() - mods[1].survivors_in.size());
    CHECK(counts[1] == mods[1].survivors_in.size() - trace.survivors.back().size());
    CHECK(counts[2] == trace.survivors.back().size());

    for (auto& p : ck.state.model.policies) {
        p.b2.value(0, 0) = 60.0;
    }
    const std::string keep_all = out_path("case/keep_all.tprn").string();
    fs::create_directories(out_path("case"));
    checkpoint::save(keep_all, ck.model_config, ck.train_config, ck.state);
    REQUIRE(tp({"case-study", "--checkpoint", keep_all, "--data", small_data(), "--index", "5", "--out", "case/all"})
                .code == 0);
    const auto ja = nlohmann::json::parse(slurp(out_path("case/all/case_study.json")));
    for (auto tag : ja.at("tags").get<std::vector<std::size_t>>()) {
        CHECK(tag == 2);
    }
    CHECK(tp({"case-study", "--checkpoint", keep_all, "--data", small_data(), "--index", "999"}).code ==
          cli::kDataError);
}

TEST_CASE("profile") {
    const fs::path dir = trained_run();
    const auto r = tp({"profile", "--checkpoint", (dir / "checkpoint.tprn").string(), "--data", small_data(), "--batch",
                       "4", "--repeats", "3", "--out", "prof"});
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(slurp(out_path("prof/profile.json")));
    CHECK(j.at("flops_speedup").get<double>() > 0.0);
    CHECK(j.at("time_speedup").get<double>() > 0.0);
    CHECK(tp({"profile", "--checkpoint", (dir / "checkpoint.tprn").string(), "--data", small_data(), "--batch", "500"})
              .code == cli::kDataError);
}
