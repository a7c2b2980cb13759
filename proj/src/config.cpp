#include "tokenprune/config.hpp"

#include "tokenprune/errors.hpp"

#include <charconv>
#include <sstream>

namespace tokenprune {

std::string to_string(HeadKind kind) { return kind == HeadKind::classification ? "classification" : "span"; }

HeadKind parse_head_kind(const std::string& text) {
    if (text == "classification") {
        return HeadKind::classification;
    }
    if (text == "span") {
        return HeadKind::span;
    }
    throw ParameterError("unknown head_kind '" + text + "'");
}

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::size_t parse_count(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw ParameterError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument(v);
        }
        return out;
    } catch (const std::exception&) {
        throw ParameterError("config key '" + key + "': expected a real number, got '" + v + "'");
    }
}

std::string format_real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) {
            out.push_back(parse_count(key, item));
        }
    }
    return out;
}

} // namespace

KeyValues parse_key_values(const std::string& text) {
    KeyValues out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line.front() == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParameterError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

std::string format_key_values(const KeyValues& kv) {
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k + "=" + v + "\n";
    }
    return out;
}

void ModelConfig::validate() const {
    if (num_layers == 0 || hidden == 0 || heads == 0 || ffn_inner == 0 || vocab_size == 0 || max_len == 0) {
        throw ParameterError("model dimensions must all be >= 1");
    }
    if (hidden % heads != 0) {
        throw ParameterError("heads (" + std::to_string(heads) + ") must divide hidden (" + std::to_string(hidden) + ")");
    }
    for (std::size_t t = 0; t < reduction_positions.size(); ++t) {
        const std::size_t p = reduction_positions[t];
        if (p < 1 || p > num_layers - 1) {
            throw ParameterError("reduction position " + std::to_string(p) + " outside [1, num_layers-1]");
        }
        if (t > 0 && p <= reduction_positions[t - 1]) {
            throw ParameterError("reduction positions must be strictly increasing");
        }
    }
    if (head_kind == HeadKind::classification && num_classes < 2) {
        throw ParameterError("classification needs num_classes >= 2");
    }
}

KeyValues ModelConfig::to_key_values() const {
    std::string positions;
    for (std::size_t i = 0; i < reduction_positions.size(); ++i) {
        positions += (i ? "," : "") + std::to_string(reduction_positions[i]);
    }
    return {
        {"num_layers", std::to_string(num_layers)},
        {"hidden", std::to_string(hidden)},
        {"heads", std::to_string(heads)},
        {"ffn_inner", std::to_string(ffn_inner)},
        {"vocab_size", std::to_string(vocab_size)},
        {"max_len", std::to_string(max_len)},
        {"reduction_positions", positions},
        {"head_kind", to_string(head_kind)},
        {"num_classes", std::to_string(num_classes)},
        {"policy_init_bias", format_real(policy_init_bias)},
    };
}

bool ModelConfig::apply(const std::string& key, const std::string& value) {
    if (key == "num_layers") {
        num_layers = parse_count(key, value);
    } else if (key == "hidden") {
        hidden = parse_count(key, value);
    } else if (key == "heads") {
        heads = parse_count(key, value);
    } else if (key == "ffn_inner") {
        ffn_inner = parse_count(key, value);
    } else if (key == "vocab_size") {
        vocab_size = parse_count(key, value);
    } else if (key == "max_len") {
        max_len = parse_count(key, value);
    } else if (key == "reduction_positions") {
        reduction_positions = parse_list(key, value);
    } else if (key == "head_kind") {
        head_kind = parse_head_kind(value);
    } else if (key == "num_classes") {
        num_classes = parse_count(key, value);
    } else if (key == "policy_init_bias") {
        policy_init_bias = parse_real(key, value);
    } else {
        return false;
    }
    return true;
}

double TrainConfig::resolved_imitation_fraction(HeadKind kind) const {
    if (imitation_fraction) {
        return *imitation_fraction;
    }
    return kind == HeadKind::span ? 0.2 : 0.5;
}

std::size_t TrainConfig::stage_epochs(int stage) const {
    // Policy warmup runs ceil((N+1)/2) epochs; the other two stages run N.
    return stage == 2 ? (epochs + 2) / 2 : epochs;
}

void TrainConfig::validate() const {
    if (num_action_samples < 1 || epochs < 1 || batch_size < 1) {
        throw ParameterError("num_action_samples, epochs and batch_size must be >= 1");
    }
    if (imitation_fraction && (*imitation_fraction < 0.0 || *imitation_fraction > 1.0)) {
        throw ParameterError("imitation_fraction must lie in [0, 1]");
    }
    if (warmup_fraction < 0.0 || warmup_fraction > 1.0 || kd_alpha < 0.0 || kd_alpha > 1.0) {
        throw ParameterError("warmup_fraction and kd_alpha must lie in [0, 1]");
    }
    if (lambda < 0.0 || kd_temperature <= 0.0 || rl_beta < 0.0) {
        throw ParameterError("lambda and rl_beta must be >= 0, kd_temperature > 0");
    }
}

KeyValues TrainConfig::to_key_values() const {
    return {
        {"num_action_samples", std::to_string(num_action_samples)},
        {"imitation_fraction", imitation_fraction ? format_real(*imitation_fraction) : "auto"},
        {"lambda", format_real(lambda)},
        {"epochs", std::to_string(epochs)},
        {"batch_size", std::to_string(batch_size)},
        {"learning_rate", format_real(learning_rate)},
        {"policy_learning_rate", format_real(policy_learning_rate)},
        {"finetune_learning_rate", format_real(finetune_learning_rate)},
        {"warmup_fraction", format_real(warmup_fraction)},
        {"adam_beta1", format_real(adam_beta1)},
        {"adam_beta2", format_real(adam_beta2)},
        {"adam_eps", format_real(adam_eps)},
        {"kd_temperature", format_real(kd_temperature)},
        {"kd_alpha", format_real(kd_alpha)},
        {"rl_beta", format_real(rl_beta)},
        {"greedy_threshold", format_real(greedy_threshold)},
        {"divergence_factor", format_real(divergence_factor)},
        {"seed", std::to_string(seed)},
    };
}

bool TrainConfig::apply(const std::string& key, const std::string& value) {
    if (key == "num_action_samples") {
        num_action_samples = parse_count(key, value);
    } else if (key == "imitation_fraction") {
        imitation_fraction = value == "auto" ? std::nullopt : std::optional<double>(parse_real(key, value));
    } else if (key == "lambda") {
        lambda = parse_real(key, value);
    } else if (key == "epochs") {
        epochs = parse_count(key, value);
    } else if (key == "batch_size") {
        batch_size = parse_count(key, value);
    } else if (key == "learning_rate") {
        learning_rate = parse_real(key, value);
    } else if (key == "policy_learning_rate") {
        policy_learning_rate = parse_real(key, value);
    } else if (key == "finetune_learning_rate") {
        finetune_learning_rate = parse_real(key, value);
    } else if (key == "warmup_fraction") {
        warmup_fraction = parse_real(key, value);
    } else if (key == "adam_beta1") {
        adam_beta1 = parse_real(key, value);
    } else if (key == "adam_beta2") {
        adam_beta2 = parse_real(key, value);
    } else if (key == "adam_eps") {
        adam_eps = parse_real(key, value);
    } else if (key == "kd_temperature") {
        kd_temperature = parse_real(key, value);
    } else if (key == "kd_alpha") {
        kd_alpha = parse_real(key, value);
    } else if (key == "rl_beta") {
        rl_beta = parse_real(key, value);
    } else if (key == "greedy_threshold") {
        greedy_threshold = parse_real(key, value);
    } else if (key == "divergence_factor") {
        divergence_factor = parse_real(key, value);
    } else if (key == "seed") {
        seed = parse_count(key, value);
    } else {
        return false;
    }
    return true;
}

} // namespace tokenprune
