#include "tokenprune/cli.hpp"

#include "tokenprune/checkpoint.hpp"
#include "tokenprune/errors.hpp"
#include "tokenprune/pipeline.hpp"
#include "tokenprune/profiling.hpp"
#include "tokenprune/reduction.hpp"
#include "tokenprune/strategies.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace tokenprune::cli {

namespace fs = std::filesystem;

KeyValues ExperimentConfig::to_key_values() const {
    KeyValues kv = model.to_key_values();
    for (auto& [k, v] : train.to_key_values()) {
        kv[k] = v;
    }
    std::ostringstream frac;
    frac.precision(17);
    frac << dev_fraction;
    kv["data_path"] = data_path;
    kv["dev_path"] = dev_path;
    kv["dev_fraction"] = frac.str();
    kv["output_dir"] = output_dir;
    return kv;
}

void ExperimentConfig::apply(const std::string& key, const std::string& value) {
    if (model.apply(key, value) || train.apply(key, value)) {
        return;
    }
    if (key == "data_path") {
        data_path = value;
    } else if (key == "dev_path") {
        dev_path = value;
    } else if (key == "output_dir") {
        output_dir = value;
    } else if (key == "dev_fraction") {
        double f = 0.0;
        try {
            f = std::stod(value);
        } catch (const std::exception&) {
            throw ParameterError("config key 'dev_fraction': expected a real number, got '" + value + "'");
        }
        if (!(f > 0.0 && f < 1.0)) {
            throw ParameterError("dev_fraction must lie in (0, 1)");
        }
        dev_fraction = f;
    } else {
        throw ParameterError("unknown config key '" + key + "'");
    }
}

void ExperimentConfig::apply(const KeyValues& kv) {
    for (const auto& [k, v] : kv) {
        apply(k, v);
    }
}

std::string output_root() {
    const char* env = std::getenv("TOKENPRUNE_OUT");
    return env != nullptr && *env != '\0' ? std::string(env) : std::string(".");
}

std::string resolve_output(const std::string& path) {
    const fs::path p(path);
    return p.is_absolute() ? p.string() : (fs::path(output_root()) / p).string();
}

std::pair<synthetic::Dataset, synthetic::Dataset> split_dataset(const synthetic::Dataset& data, double dev_fraction) {
    const std::size_t n = data.examples.size();
    const auto dev_n = static_cast<std::size_t>(std::ceil(dev_fraction * static_cast<double>(n)));
    if (n < 2 || dev_n == 0 || dev_n >= n) {
        throw InputError("dataset of " + std::to_string(n) + " examples is too small to split");
    }
    synthetic::Dataset train{data.task, data.header, {data.examples.begin(), data.examples.end() - static_cast<std::ptrdiff_t>(dev_n)}};
    synthetic::Dataset dev{data.task, data.header, {data.examples.end() - static_cast<std::ptrdiff_t>(dev_n), data.examples.end()}};
    return {std::move(train), std::move(dev)};
}

void adopt_dataset_shape(ModelConfig& model, const synthetic::Dataset& data) {
    const auto& h = data.header;
    model.vocab_size = h.value("vocab_size", model.vocab_size);
    model.max_len = std::max<std::size_t>(model.max_len, h.value("seq_len_max", model.max_len));
    if (data.task == synthetic::TaskKind::keyword) {
        model.head_kind = HeadKind::classification;
        model.num_classes = h.value("n_classes", model.num_classes);
    } else {
        model.head_kind = HeadKind::span;
    }
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw InputError("cannot write " + path.string());
    }
    out << text;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError("cannot read " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_history(const fs::path& path, const std::vector<pipeline::HistoryRecord>& history) {
    std::string text;
    for (const auto& r : history) {
        text += r.to_json().dump() + "\n";
    }
    write_text(path, text);
}

std::string format_number(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
}

// Settings shared by train and sweep: config file, --set overrides and convenience flags.
struct Overrides {
    std::string config_file;
    std::vector<std::string> sets;
    std::optional<double> lambda;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--config", config_file, "key=value config file");
        cmd->add_option("--set", sets, "key=value override (repeatable)");
        cmd->add_option("--lambda", lambda, "per-token selection penalty");
        cmd->add_option("--seed", seed, "master seed");
        cmd->add_option("--epochs", epochs, "epochs N (stage 2 runs ceil((N+1)/2))");
    }

    void apply(ExperimentConfig& cfg) const {
        if (!config_file.empty()) {
            cfg.apply(parse_key_values(read_text(config_file)));
        }
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) {
                throw ParameterError("--set expects key=value, got '" + s + "'");
            }
            cfg.apply(s.substr(0, eq), s.substr(eq + 1));
        }
        if (lambda) {
            cfg.train.lambda = *lambda;
        }
        if (seed) {
            cfg.train.seed = *seed;
        }
        if (epochs) {
            cfg.train.epochs = *epochs;
        }
    }
};

std::pair<synthetic::Dataset, synthetic::Dataset> load_splits(const ExperimentConfig& cfg) {
    const auto data = synthetic::load_dataset(cfg.data_path);
    if (!cfg.dev_path.empty()) {
        return {data, synthetic::load_dataset(cfg.dev_path)};
    }
    return split_dataset(data, cfg.dev_fraction);
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
    std::string task;
    std::uint64_t seed = 1;
    std::size_t n = 20000;
    std::size_t seq_min = 48;
    std::size_t seq_max = 64;
    std::size_t classes = 4;
    std::size_t signal = 4;
    std::size_t class_width = 1;
    std::size_t vocab = 256;
    std::string out;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
    synthetic::Dataset data;
    if (synthetic::parse_task_kind(a.task) == synthetic::TaskKind::keyword) {
        data = synthetic::gen_keyword_task({a.n, a.seq_min, a.seq_max, a.classes, a.signal, a.class_width, a.vocab, a.seed});
    } else {
        data = synthetic::gen_marker_span_task({a.n, a.seq_min, a.seq_max, a.vocab, a.seed});
    }
    const fs::path path = resolve_output(a.out.empty() ? "data/" + a.task + "-seed" + std::to_string(a.seed) + ".jsonl" : a.out);
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    synthetic::save_dataset(path.string(), data);
    KeyValues kv;
    for (const auto& [k, v] : data.header.items()) {
        kv[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
    kv["task"] = a.task;
    write_text(path.string() + ".config", format_key_values(kv));
    out << "wrote " << data.size() << " examples to " << path.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::string dev;
    std::string out = "runs/train";
    Overrides overrides;
    int stage = 0;
    bool resume = false;
    std::string from;
    std::size_t max_epochs = 0;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    const fs::path dir = resolve_output(a.out);
    fs::create_directories(dir);
    const fs::path ckpath = dir / "checkpoint.tprn";

    ExperimentConfig cfg;
    std::optional<checkpoint::Checkpoint> ck;
    if (a.resume) {
        ck = checkpoint::load(ckpath.string());
    } else if (a.stage > 1) {
        ck = checkpoint::load(a.from.empty() ? ckpath.string() : a.from);
    }
    cfg.data_path = a.data;
    cfg.dev_path = a.dev;
    cfg.output_dir = dir.string();
    if (ck) {
        cfg.model = ck->model_config;
        cfg.train = ck->train_config;
    }
    const auto [train, dev] = load_splits(cfg);
    if (!ck) {
        adopt_dataset_shape(cfg.model, train);
    }
    a.overrides.apply(cfg);
    cfg.model.validate();
    cfg.train.validate();

    pipeline::TrainState state;
    if (ck) {
        if (cfg.model.to_key_values() != ck->model_config.to_key_values()) {
            throw ShapeError("model configuration differs from the checkpoint being continued");
        }
        state = std::move(ck->state);
        if (a.stage > 1 && !a.resume && state.stage != a.stage) {
            throw ContractError("checkpoint is at stage " + std::to_string(state.stage) + ", cannot run stage " +
                                std::to_string(a.stage));
        }
    } else {
        if (a.stage > 1) {
            throw ContractError("--stage " + std::to_string(a.stage) + " needs a checkpoint");
        }
        state = pipeline::initial_state(cfg.model, cfg.train);
    }
    if (a.stage != 0 && state.stage != a.stage && state.stage <= 3) {
        throw ContractError("checkpoint is at stage " + std::to_string(state.stage) + ", cannot run stage " +
                            std::to_string(a.stage));
    }
    write_text(dir / "config.txt", format_key_values(cfg.to_key_values()));

    std::size_t epochs_run = 0;
    pipeline::PipelineHooks hooks;
    hooks.last_stage = a.stage;
    hooks.on_epoch = [&](const pipeline::TrainState& s) {
        checkpoint::save(ckpath.string(), cfg.model, cfg.train, s);
        write_history(dir / "history.jsonl", s.history);
        const auto& r = s.history.back();
        out << "stage " << r.stage << " epoch " << r.epoch << ": dev_metric=" << r.dev_metric
            << " mean_selected=" << r.mean_selected << " flops_speedup=" << r.flops_speedup
            << " reward_mean=" << r.reward_mean << std::endl;
        ++epochs_run;
        return a.max_epochs == 0 || epochs_run < a.max_epochs;
    };
    pipeline::train_pipeline(state, train, dev, cfg.train, hooks);
    checkpoint::save(ckpath.string(), cfg.model, cfg.train, state);
    write_history(dir / "history.jsonl", state.history);
    out << "checkpoint " << ckpath.string() << " (next stage " << state.stage << ")\n";
    return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string split = "all";
    double dev_fraction = 0.1;
    std::string mode = "greedy";
    std::uint64_t seed = 1;
    std::string out = "runs/eval";
    std::string csv;
};

synthetic::Dataset pick_split(const std::string& data_path, const std::string& split, double dev_fraction) {
    auto data = synthetic::load_dataset(data_path);
    if (split == "all") {
        return data;
    }
    auto [train, dev] = split_dataset(data, dev_fraction);
    return split == "dev" ? std::move(dev) : std::move(train);
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const auto ck = checkpoint::load(a.checkpoint);
    const auto data = pick_split(a.data, a.split, a.dev_fraction);
    const auto mode = pipeline::parse_eval_mode(a.mode);
    const auto res = pipeline::evaluate(ck.state.model, data, mode, ck.train_config.greedy_threshold, a.seed);

    const fs::path dir = resolve_output(a.out);
    fs::create_directories(dir);
    const fs::path csv = a.csv.empty() ? dir / "flops.csv" : fs::path(resolve_output(a.csv));
    {
        std::ostringstream rows;
        profiling::write_flops_csv(rows, res.rows);
        write_text(csv, rows.str());
    }
    nlohmann::json summary = {{"mode", a.mode},
                              {"examples", data.size()},
                              {"metric", res.metric},
                              {"mean_log_likelihood", res.mean_log_likelihood},
                              {"mean_selected", res.mean_selected},
                              {"signal_recall", res.signal_recall},
                              {"flops", res.flops},
                              {"reference_flops", res.reference_flops},
                              {"flops_speedup", res.flops_speedup}};
    write_text(dir / "eval.json", summary.dump(2) + "\n");
    KeyValues kv = ck.model_config.to_key_values();
    for (auto& [k, v] : ck.train_config.to_key_values()) {
        kv[k] = v;
    }
    kv["checkpoint"] = a.checkpoint;
    kv["data_path"] = a.data;
    kv["split"] = a.split;
    kv["dev_fraction"] = format_number(a.dev_fraction);
    kv["mode"] = a.mode;
    kv["eval_seed"] = std::to_string(a.seed);
    write_text(dir / "config.txt", format_key_values(kv));

    out << "examples=" << data.size() << " metric=" << res.metric << " flops_speedup=" << res.flops_speedup
        << " mean_selected=" << res.mean_selected << " signal_recall=" << res.signal_recall << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------

struct SweepArgs {
    std::string data;
    std::string dev;
    std::string out = "runs/sweep";
    Overrides overrides;
    std::vector<double> lambdas;
    std::vector<std::uint64_t> seeds{1};
    std::vector<std::string> strategies;
    std::vector<double> keep_ratios{0.1, 0.2, 0.3, 0.5, 0.7, 1.0};
    std::string checkpoint;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out) {
    if (a.lambdas.empty() && a.strategies.empty()) {
        throw ParameterError("sweep needs --lambdas or --strategies");
    }
    const fs::path dir = resolve_output(a.out);
    fs::create_directories(dir);
    ExperimentConfig cfg;
    cfg.data_path = a.data;
    cfg.dev_path = a.dev;
    cfg.output_dir = dir.string();
    const auto [train, dev] = load_splits(cfg);
    adopt_dataset_shape(cfg.model, train);
    a.overrides.apply(cfg);
    cfg.model.validate();
    cfg.train.validate();
    write_text(dir / "config.txt", format_key_values(cfg.to_key_values()));

    struct Cell {
        double metric = 0, speedup = 0, selected = 0, recall = 0;
        std::size_t n = 0;
    };
    std::map<double, Cell> curve;
    std::map<std::pair<std::string, double>, Cell> strategy_cells;
    std::ostringstream per_seed;
    std::ostringstream strategy_rows;
    per_seed << "seed,lambda,metric,flops_speedup,mean_selected,signal_recall\n";
    strategy_rows << "seed,strategy,keep_ratio,metric,flops_speedup\n";
    per_seed.precision(10);
    strategy_rows.precision(10);

    for (const std::uint64_t seed : a.seeds) {
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        const fs::path seed_dir = dir / ("seed" + std::to_string(seed));
        pipeline::TrainState stage1;
        if (!a.checkpoint.empty()) {
            auto ck = checkpoint::load(a.checkpoint);
            if (ck.state.stage < 2) {
                throw ContractError("sweep --checkpoint needs a finished stage-1 checkpoint");
            }
            stage1 = std::move(ck.state);
        } else {
            stage1 = pipeline::initial_state(cfg.model, tc);
            pipeline::train_pipeline(stage1, train, dev, tc, {{}, 1});
            fs::create_directories(seed_dir);
            checkpoint::save((seed_dir / "stage1.tprn").string(), cfg.model, tc, stage1);
        }

        for (const auto& name : a.strategies) {
            const auto kind = strategies::parse_strategy(name);
            for (const double keep : a.keep_ratios) {
                strategies::EliminationOptions eo;
                eo.strategy = kind;
                eo.keep_ratio = keep;
                eo.seed = seed;
                const auto r = strategies::theoretical_elimination_eval(stage1.model, dev, eo);
                strategy_rows << seed << ',' << name << ',' << keep << ',' << r.metric << ',' << r.flops_speedup << '\n';
                auto& c = strategy_cells[{name, keep}];
                c.metric += r.metric;
                c.speedup += r.flops_speedup;
                ++c.n;
                out << "seed " << seed << " " << name << " keep=" << keep << ": metric=" << r.metric << "\n";
            }
        }

        for (const double lambda : a.lambdas) {
            tc.lambda = lambda;
            pipeline::TrainState st = stage1;
            pipeline::train_pipeline(st, train, dev, tc);
            const fs::path run_dir = seed_dir / ("lambda" + format_number(lambda));
            fs::create_directories(run_dir);
            checkpoint::save((run_dir / "checkpoint.tprn").string(), cfg.model, tc, st);
            write_history(run_dir / "history.jsonl", st.history);
            ExperimentConfig run_cfg = cfg;
            run_cfg.train = tc;
            run_cfg.output_dir = run_dir.string();
            write_text(run_dir / "config.txt", format_key_values(run_cfg.to_key_values()));
            const auto ev = pipeline::evaluate(st.model, dev, pipeline::EvalMode::greedy, tc.greedy_threshold, seed);
            per_seed << seed << ',' << lambda << ',' << ev.metric << ',' << ev.flops_speedup << ',' << ev.mean_selected
                     << ',' << ev.signal_recall << '\n';
            auto& c = curve[lambda];
            c.metric += ev.metric;
            c.speedup += ev.flops_speedup;
            c.selected += ev.mean_selected;
            c.recall += ev.signal_recall;
            ++c.n;
            out << "seed " << seed << " lambda=" << lambda << ": metric=" << ev.metric
                << " flops_speedup=" << ev.flops_speedup << " mean_selected=" << ev.mean_selected << "\n";
        }
    }

    if (!a.lambdas.empty()) {
        std::ostringstream rows;
        rows.precision(10);
        rows << "lambda,metric,flops_speedup,mean_selected,signal_recall\n";
        for (const auto& [lambda, c] : curve) {
            const double n = static_cast<double>(c.n);
            rows << lambda << ',' << c.metric / n << ',' << c.speedup / n << ',' << c.selected / n << ','
                 << c.recall / n << '\n';
        }
        write_text(dir / "curve.csv", rows.str());
        write_text(dir / "sweep.csv", per_seed.str());
    }
    if (!a.strategies.empty()) {
        std::vector<strategies::CurveRow> rows;
        for (const auto& name : a.strategies) {
            for (const double keep : a.keep_ratios) {
                const auto& c = strategy_cells.at({name, keep});
                const double n = static_cast<double>(c.n);
                rows.push_back({name, keep, c.metric / n, c.speedup / n});
            }
        }
        std::ostringstream csv;
        strategies::write_curve_csv(csv, rows);
        write_text(dir / "strategies.csv", csv.str());
        write_text(dir / "strategies_by_seed.csv", strategy_rows.str());
    }
    out << "wrote sweep outputs to " << dir.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------

struct CaseStudyArgs {
    std::string checkpoint;
    std::string data;
    std::size_t index = 0;
    std::string mode = "greedy";
    std::uint64_t seed = 1;
    std::string json;
    std::string out = "runs/case-study";
};

int cmd_case_study(const CaseStudyArgs& a, std::ostream& out) {
    const auto ck = checkpoint::load(a.checkpoint);
    const auto data = synthetic::load_dataset(a.data);
    if (a.index >= data.size()) {
        throw InputError("example index " + std::to_string(a.index) + " outside dataset of " + std::to_string(data.size()));
    }
    const auto& ex = data.examples[a.index];
    const auto& model = ck.state.model;
    const auto mode = pipeline::parse_eval_mode(a.mode);
    transformer::LayerTrace trace;
    if (mode == pipeline::EvalMode::full) {
        trace = transformer::full_forward(model, ex.tokens);
    } else {
        Rng rng = make_stream(a.seed, "case_study", a.index);
        const auto gate = reduction::policy_gate(
            model, mode == pipeline::EvalMode::sample ? reduction::DecisionMode::sample : reduction::DecisionMode::greedy,
            &rng, ck.train_config.greedy_threshold);
        trace = reduction::reduced_forward(model, ex.tokens, gate);
    }

    // Tag t < T: skipped at module t; T: kept through every layer.
    const auto& positions = model.config.reduction_positions;
    const std::size_t kept_tag = positions.size();
    std::vector<std::size_t> tags(ex.tokens.size(), kept_tag);
    std::vector<std::size_t> counts(kept_tag + 1, 0);
    for (std::size_t j = 0; j < tags.size(); ++j) {
        const std::size_t layer = trace.termination_layer[j];
        for (std::size_t t = 0; t < positions.size(); ++t) {
            if (positions[t] == layer && layer != trace.num_layers()) {
                tags[j] = t;
            }
        }
        ++counts[tags[j]];
    }
    const auto pred = transformer::predict(model, reduction::assemble_final_states(trace));

    out << "# tag t<" << kept_tag << ": skipped at reduction module t; tag " << kept_tag << ": kept to the top layer\n";
    out << "# position token tag signal\n";
    for (std::size_t j = 0; j < tags.size(); ++j) {
        out << j << ' ' << ex.tokens[j] << ' ' << tags[j] << ' ' << static_cast<int>(ex.signal[j]) << '\n';
    }
    for (std::size_t t = 0; t <= kept_tag; ++t) {
        out << "tag " << t << ": " << counts[t] << " tokens\n";
    }
    out << "score=" << transformer::score(transformer::decode(pred), ex.label)
        << " signal_recall=" << synthetic::selection_recall(trace, ex.signal) << "\n";

    nlohmann::json j = reduction::trace_to_json(trace, ex.tokens);
    j["index"] = a.index;
    j["tags"] = tags;
    j["tag_counts"] = counts;
    j["signal"] = ex.signal;
    j["mode"] = a.mode;
    const fs::path path = a.json.empty() ? fs::path(resolve_output(a.out)) / "case_study.json" : fs::path(resolve_output(a.json));
    write_text(path, j.dump(2) + "\n");
    return kOk;
}

// ---------------------------------------------------------------------------

struct ProfileArgs {
    std::string checkpoint;
    std::string data;
    std::size_t batch = 32;
    std::size_t repeats = 20;
    std::string out = "runs/profile";
};

int cmd_profile(const ProfileArgs& a, std::ostream& out) {
    const auto ck = checkpoint::load(a.checkpoint);
    const auto data = synthetic::load_dataset(a.data);
    if (data.size() < a.batch || a.batch == 0) {
        throw InputError("profile needs at least --batch examples");
    }
    const std::span<const synthetic::Example> batch(data.examples.data(), a.batch);
    const auto cmp = pipeline::compare_wall_time(ck.state.model, batch, ck.train_config.greedy_threshold, a.repeats);
    nlohmann::json j = {{"batch", a.batch},
                        {"repeats", a.repeats},
                        {"flops_speedup", cmp.flops_speedup},
                        {"time_speedup", cmp.time_speedup},
                        {"full_seconds", cmp.full.median_seconds},
                        {"reduced_seconds", cmp.reduced.median_seconds},
                        {"enlarged", cmp.full.enlarged || cmp.reduced.enlarged}};
    write_text(fs::path(resolve_output(a.out)) / "profile.json", j.dump(2) + "\n");
    out << "flops_speedup=" << cmp.flops_speedup << " time_speedup=" << cmp.time_speedup << "\n";
    return kOk;
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Dynamic token reduction for small transformer encoders", "tokenprune"};
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* c_gen = app.add_subcommand("generate", "write a synthetic dataset as JSON lines");
    c_gen->add_option("--task", gen.task, "keyword or span")->required()->check(CLI::IsMember({"keyword", "span"}));
    c_gen->add_option("--seed", gen.seed, "generator seed");
    c_gen->add_option("--n", gen.n, "number of examples");
    c_gen->add_option("--seq-min", gen.seq_min, "minimum length, anchor included");
    c_gen->add_option("--seq-max", gen.seq_max, "maximum length, anchor included");
    c_gen->add_option("--classes", gen.classes, "keyword classes");
    c_gen->add_option("--signal", gen.signal, "keyword signal tokens");
    c_gen->add_option("--class-width", gen.class_width, "token ids per keyword class band");
    c_gen->add_option("--vocab", gen.vocab, "vocabulary size");
    c_gen->add_option("--out", gen.out, "output file");

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "run the three-stage training pipeline");
    c_train->add_option("--data", train.data, "dataset JSONL")->required();
    c_train->add_option("--dev", train.dev, "separate dev JSONL (default: tail split of --data)");
    c_train->add_option("--out", train.out, "run directory");
    c_train->add_option("--stage", train.stage, "run only this stage")->check(CLI::Range(1, 3));
    c_train->add_flag("--resume", train.resume, "continue from <out>/checkpoint.tprn");
    c_train->add_option("--from", train.from, "checkpoint to start --stage 2/3 from");
    c_train->add_option("--max-epochs", train.max_epochs, "stop after this many epochs in this invocation");
    train.overrides.add_to(c_train);

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint and export per-example FLOPs");
    c_eval->add_option("--checkpoint", ev.checkpoint, "TPRN1 checkpoint")->required();
    c_eval->add_option("--data", ev.data, "dataset JSONL")->required();
    c_eval->add_option("--split", ev.split, "all, train or dev")->check(CLI::IsMember({"all", "train", "dev"}));
    c_eval->add_option("--dev-fraction", ev.dev_fraction, "tail fraction used as dev");
    c_eval->add_option("--mode", ev.mode, "greedy, sample or full")->check(CLI::IsMember({"greedy", "sample", "full"}));
    c_eval->add_option("--seed", ev.seed, "sampling seed");
    c_eval->add_option("--out", ev.out, "output directory");
    c_eval->add_option("--csv", ev.csv, "per-example FLOPs CSV path");

    SweepArgs sw;
    auto* c_sweep = app.add_subcommand("sweep", "lambda trade-off curve or strategy comparison");
    c_sweep->add_option("--data", sw.data, "dataset JSONL")->required();
    c_sweep->add_option("--dev", sw.dev, "separate dev JSONL");
    c_sweep->add_option("--out", sw.out, "output directory");
    c_sweep->add_option("--lambdas", sw.lambdas, "comma-separated lambda values")->delimiter(',');
    c_sweep->add_option("--seeds", sw.seeds, "comma-separated seeds")->delimiter(',');
    c_sweep->add_option("--strategies", sw.strategies, "random,attention,residual")->delimiter(',');
    c_sweep->add_option("--keep-ratios", sw.keep_ratios, "comma-separated keep ratios")->delimiter(',');
    c_sweep->add_option("--checkpoint", sw.checkpoint, "reuse this stage-1 model instead of training one");
    sw.overrides.add_to(c_sweep);

    CaseStudyArgs cs;
    auto* c_case = app.add_subcommand("case-study", "tag each token of one example with where it stopped");
    c_case->add_option("--checkpoint", cs.checkpoint, "TPRN1 checkpoint")->required();
    c_case->add_option("--data", cs.data, "dataset JSONL")->required();
    c_case->add_option("--index", cs.index, "example index");
    c_case->add_option("--mode", cs.mode, "greedy, sample or full")->check(CLI::IsMember({"greedy", "sample", "full"}));
    c_case->add_option("--seed", cs.seed, "sampling seed");
    c_case->add_option("--json", cs.json, "trace JSON path");
    c_case->add_option("--out", cs.out, "output directory");

    ProfileArgs pr;
    auto* c_prof = app.add_subcommand("profile", "wall-time versus FLOPs speedup on one batch");
    c_prof->add_option("--checkpoint", pr.checkpoint, "TPRN1 checkpoint")->required();
    c_prof->add_option("--data", pr.data, "dataset JSONL")->required();
    c_prof->add_option("--batch", pr.batch, "examples per timed batch");
    c_prof->add_option("--repeats", pr.repeats, "timed repeats");
    c_prof->add_option("--out", pr.out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (c_gen->parsed()) {
            return cmd_generate(gen, out);
        }
        if (c_train->parsed()) {
            return cmd_train(train, out);
        }
        if (c_eval->parsed()) {
            return cmd_eval(ev, out);
        }
        if (c_sweep->parsed()) {
            return cmd_sweep(sw, out);
        }
        if (c_case->parsed()) {
            return cmd_case_study(cs, out);
        }
        if (c_prof->parsed()) {
            return cmd_profile(pr, out);
        }
    } catch (const DivergenceError& e) {
        err << "error: numeric divergence: " << e.what() << "\n";
        return kDivergence;
    } catch (const ParameterError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kDataError;
    }
    return kUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"tokenprune"};
    for (const auto& a : args) {
        argv.push_back(a.c_str());
    }
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace tokenprune::cli
