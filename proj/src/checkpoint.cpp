#include "tokenprune/checkpoint.hpp"

#include "tokenprune/errors.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

namespace tokenprune::checkpoint {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[5] = {'T', 'P', 'R', 'N', '1'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_text(std::ostream& out, const std::string& s) {
    put<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T get(std::istream& in) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw InputError("checkpoint truncated");
    }
    return v;
}

std::string get_bytes(std::istream& in, std::uint64_t n) {
    if (n > (1ULL << 32)) {
        throw InputError("checkpoint corrupt: implausible length");
    }
    std::string s(n, '\0');
    if (!in.read(s.data(), static_cast<std::streamsize>(n))) {
        throw InputError("checkpoint truncated");
    }
    return s;
}

void put_matrix(std::ostream& out, const std::string& name, const Matrix& m) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, m.rows());
    put<std::uint64_t>(out, m.cols());
    out.write(reinterpret_cast<const char*>(m.data().data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

Matrix get_matrix(std::istream& in, std::string& name) {
    name = get_bytes(in, get<std::uint32_t>(in));
    const auto ndims = get<std::uint32_t>(in);
    if (ndims == 0 || ndims > 2) {
        throw InputError("checkpoint entry " + name + ": unsupported rank " + std::to_string(ndims));
    }
    std::uint64_t rows = 1;
    std::uint64_t cols = get<std::uint64_t>(in);
    if (ndims == 2) {
        rows = cols;
        cols = get<std::uint64_t>(in);
    }
    if (rows * cols > (1ULL << 28)) {
        throw InputError("checkpoint entry " + name + ": implausible size");
    }
    Matrix m(rows, cols);
    if (!in.read(reinterpret_cast<char*>(m.data().data()), static_cast<std::streamsize>(m.size() * sizeof(double)))) {
        throw InputError("checkpoint truncated inside " + name);
    }
    return m;
}

void assign(transformer::Model& model, const std::string& name, Matrix value) {
    Parameter* p = model.find(name);
    if (p == nullptr) {
        throw ShapeError("checkpoint parameter " + name + " does not exist in the configured model");
    }
    if (!p->value.same_shape(value)) {
        throw ShapeError("checkpoint parameter " + name + " has shape " + std::to_string(value.rows()) + "x" +
                         std::to_string(value.cols()) + ", model expects " + std::to_string(p->value.rows()) + "x" +
                         std::to_string(p->value.cols()));
    }
    p->value = std::move(value);
}

} // namespace

void write(std::ostream& out, const ModelConfig& model_config, const TrainConfig& train_config,
           const pipeline::TrainState& state) {
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kVersion);
    KeyValues kv = model_config.to_key_values();
    for (auto& [k, v] : train_config.to_key_values()) {
        kv[k] = v;
    }
    put_text(out, format_key_values(kv));

    nlohmann::json progress;
    progress["stage"] = state.stage;
    progress["epochs_done"] = state.epochs_done;
    progress["optimizer_step"] = state.optimizer.step;
    progress["stage1_log_likelihood"] = state.stage1_log_likelihood;
    progress["history"] = nlohmann::json::array();
    for (const auto& r : state.history) {
        progress["history"].push_back(r.to_json());
    }
    put_text(out, progress.dump());

    std::vector<std::pair<std::string, const Matrix*>> entries;
    state.model.for_each_parameter([&](const Parameter& p) { entries.emplace_back(p.name, &p.value); });
    if (state.teacher) {
        state.teacher->for_each_parameter([&](const Parameter& p) { entries.emplace_back("teacher." + p.name, &p.value); });
    }
    for (const auto& [name, m] : state.optimizer.m) {
        entries.emplace_back("adam.m." + name, &m);
    }
    for (const auto& [name, v] : state.optimizer.v) {
        entries.emplace_back("adam.v." + name, &v);
    }
    put<std::uint64_t>(out, entries.size());
    for (const auto& [name, m] : entries) {
        put_matrix(out, name, *m);
    }
    if (!out) {
        throw InputError("checkpoint write failed");
    }
}

Checkpoint read(std::istream& in) {
    char magic[sizeof kMagic];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw InputError("not a TPRN1 checkpoint");
    }
    const auto version = get<std::uint32_t>(in);
    if (version != kVersion) {
        throw InputError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    for (const auto& [k, v] : parse_key_values(get_bytes(in, get<std::uint64_t>(in)))) {
        if (!ck.model_config.apply(k, v) && !ck.train_config.apply(k, v)) {
            throw InputError("checkpoint config has unknown key '" + k + "'");
        }
    }
    ck.model_config.validate();

    nlohmann::json progress;
    try {
        progress = nlohmann::json::parse(get_bytes(in, get<std::uint64_t>(in)));
        ck.state.stage = progress.at("stage").get<int>();
        ck.state.epochs_done = progress.at("epochs_done").get<std::size_t>();
        ck.state.optimizer.step = progress.at("optimizer_step").get<std::size_t>();
        ck.state.stage1_log_likelihood = progress.at("stage1_log_likelihood").get<double>();
        for (const auto& r : progress.at("history")) {
            ck.state.history.push_back(pipeline::HistoryRecord::from_json(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("checkpoint progress record malformed: ") + e.what());
    }

    ck.state.model = transformer::Model::initialize(ck.model_config, ck.train_config.seed);
    const auto count = get<std::uint64_t>(in);
    std::size_t model_entries = 0;
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name;
        Matrix m = get_matrix(in, name);
        if (name.rfind("teacher.", 0) == 0) {
            if (!ck.state.teacher) {
                ck.state.teacher = transformer::Model::initialize(ck.model_config, ck.train_config.seed);
            }
            assign(*ck.state.teacher, name.substr(8), std::move(m));
        } else if (name.rfind("adam.m.", 0) == 0) {
            ck.state.optimizer.m[name.substr(7)] = std::move(m);
        } else if (name.rfind("adam.v.", 0) == 0) {
            ck.state.optimizer.v[name.substr(7)] = std::move(m);
        } else {
            assign(ck.state.model, name, std::move(m));
            ++model_entries;
        }
    }
    std::size_t expected = 0;
    ck.state.model.for_each_parameter([&](const Parameter&) { ++expected; });
    if (model_entries != expected) {
        throw ShapeError("checkpoint holds " + std::to_string(model_entries) + " model parameters, config implies " +
                         std::to_string(expected));
    }
    return ck;
}

void save(const std::string& path, const ModelConfig& model_config, const TrainConfig& train_config,
          const pipeline::TrainState& state) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw InputError("cannot write checkpoint " + path);
        }
        write(out, model_config, train_config, state);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot open checkpoint " + path);
    }
    return read(in);
}

} // namespace tokenprune::checkpoint
