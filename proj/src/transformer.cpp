#include "tokenprune/transformer.hpp"

#include "tokenprune/errors.hpp"
#include "tokenprune/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tokenprune::transformer {

namespace {

Parameter normal_param(std::string name, std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (double& v : m.data()) {
        v = dist(rng);
    }
    return {std::move(name), std::move(m)};
}

Parameter const_param(std::string name, std::size_t rows, std::size_t cols, double value) {
    return {std::move(name), Matrix(rows, cols, value)};
}

} // namespace

Model Model::initialize(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng = make_stream(seed, "init");
    const std::size_t d = config.hidden;
    const std::size_t dh = config.head_dim();
    const std::size_t f = config.ffn_inner;
    const double wd = 1.0 / std::sqrt(static_cast<double>(d));
    const double wh = 1.0 / std::sqrt(static_cast<double>(dh));
    const double wf = 1.0 / std::sqrt(static_cast<double>(f));

    Model m;
    m.config = config;
    m.token_embedding = normal_param("embed.token", config.vocab_size, d, 1.0, rng);
    m.position_embedding = normal_param("embed.position", config.max_len, d, 1.0, rng);
    m.embed_ln_gamma = const_param("embed.ln.gamma", 1, d, 1.0);
    m.embed_ln_beta = const_param("embed.ln.beta", 1, d, 0.0);

    for (std::size_t i = 0; i < config.num_layers; ++i) {
        const std::string p = "layer" + std::to_string(i) + ".";
        LayerParams l;
        for (std::size_t h = 0; h < config.heads; ++h) {
            const std::string hs = std::to_string(h);
            l.attention.query_w.push_back(normal_param(p + "attn.query" + hs + ".w", d, dh, wd, rng));
            l.attention.query_b.push_back(const_param(p + "attn.query" + hs + ".b", 1, dh, 0.0));
            l.attention.key_w.push_back(normal_param(p + "attn.key" + hs + ".w", d, dh, wd, rng));
            l.attention.key_b.push_back(const_param(p + "attn.key" + hs + ".b", 1, dh, 0.0));
            l.attention.value_w.push_back(normal_param(p + "attn.value" + hs + ".w", d, dh, wd, rng));
            l.attention.value_b.push_back(const_param(p + "attn.value" + hs + ".b", 1, dh, 0.0));
            l.attention.out_w.push_back(
                normal_param(p + "attn.out" + hs + ".w", dh, d, wh / std::sqrt(static_cast<double>(config.heads)), rng));
        }
        l.attention.out_b = const_param(p + "attn.out.b", 1, d, 0.0);
        l.ln1_gamma = const_param(p + "ln1.gamma", 1, d, 1.0);
        l.ln1_beta = const_param(p + "ln1.beta", 1, d, 0.0);
        l.ffn_in_w = normal_param(p + "ffn.in.w", d, f, wd, rng);
        l.ffn_in_b = const_param(p + "ffn.in.b", 1, f, 0.0);
        l.ffn_out_w = normal_param(p + "ffn.out.w", f, d, wf, rng);
        l.ffn_out_b = const_param(p + "ffn.out.b", 1, d, 0.0);
        l.ln2_gamma = const_param(p + "ln2.gamma", 1, d, 1.0);
        l.ln2_beta = const_param(p + "ln2.beta", 1, d, 0.0);
        m.layers.push_back(std::move(l));
    }

    // Policy inner width equals the hidden size.
    for (std::size_t t = 0; t < config.num_modules(); ++t) {
        const std::string p = "policy" + std::to_string(t) + ".";
        PolicyParams pp;
        pp.w1 = normal_param(p + "w1", d, d, wd, rng);
        pp.b1 = const_param(p + "b1", 1, d, 0.0);
        pp.w2 = normal_param(p + "w2", d, 1, wd, rng);
        pp.b2 = const_param(p + "b2", 1, 1, config.policy_init_bias);
        m.policies.push_back(std::move(pp));
    }

    const std::size_t classes = config.head_kind == HeadKind::classification ? config.num_classes : 2;
    m.head.cls_w = normal_param("head.cls.w", d, classes, wd, rng);
    m.head.cls_b = const_param("head.cls.b", 1, classes, 0.0);
    m.head.span_start = normal_param("head.span.start", 1, d, wd, rng);
    m.head.span_end = normal_param("head.span.end", 1, d, wd, rng);
    return m;
}

std::size_t Model::parameter_count() const {
    std::size_t total = 0;
    for_each_parameter([&](const Parameter& p) { total += p.value.size(); });
    return total;
}

Parameter* Model::find(const std::string& name) {
    Parameter* found = nullptr;
    for_each_parameter([&](Parameter& p) {
        if (p.name == name) {
            found = &p;
        }
    });
    return found;
}

// ---------------------------------------------------------------------------

Var embed(Tape& tape, const Model& model, std::span<const int> token_ids, std::span<const std::size_t> positions) {
    if (token_ids.empty()) {
        throw InputError("embed: empty input sequence");
    }
    if (token_ids.size() != positions.size()) {
        throw InputError("embed: token and position lists differ in length");
    }
    std::vector<std::size_t> ids(token_ids.size());
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        if (token_ids[i] < 0 || static_cast<std::size_t>(token_ids[i]) >= model.config.vocab_size) {
            throw InputError("embed: token id " + std::to_string(token_ids[i]) + " outside vocabulary of " +
                             std::to_string(model.config.vocab_size));
        }
        if (positions[i] >= model.config.max_len) {
            throw InputError("embed: position " + std::to_string(positions[i]) + " >= max_len " +
                             std::to_string(model.config.max_len));
        }
        ids[i] = static_cast<std::size_t>(token_ids[i]);
    }
    const Var tok = tape.gather_rows(tape.parameter(model.token_embedding), std::move(ids));
    const Var pos = tape.gather_rows(tape.parameter(model.position_embedding),
                                     std::vector<std::size_t>(positions.begin(), positions.end()));
    return tape.layer_norm(tape.add(tok, pos), tape.parameter(model.embed_ln_gamma), tape.parameter(model.embed_ln_beta));
}

Matrix embed(const Model& model, std::span<const int> token_ids, std::span<const std::size_t> positions) {
    Tape tape;
    return tape.value(embed(tape, model, token_ids, positions));
}

LayerOutput layer_forward(Tape& tape, Var hidden, const LayerParams& params) {
    const Matrix& h = tape.value(hidden);
    if (h.rows() == 0) {
        throw InputError("layer_forward: empty sequence");
    }
    const auto& att = params.attention;
    const std::size_t heads = att.query_w.size();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(att.query_w.front().value.cols()));

    LayerOutput out;
    Var mixed{};
    for (std::size_t hd = 0; hd < heads; ++hd) {
        const Var q = tape.add_row(tape.matmul(hidden, tape.parameter(att.query_w[hd])), tape.parameter(att.query_b[hd]));
        const Var k = tape.add_row(tape.matmul(hidden, tape.parameter(att.key_w[hd])), tape.parameter(att.key_b[hd]));
        const Var v = tape.add_row(tape.matmul(hidden, tape.parameter(att.value_w[hd])), tape.parameter(att.value_b[hd]));
        const Var weights = tape.softmax_rows(tape.scale(tape.matmul_nt(q, k), inv_sqrt_dh));
        out.attention.push_back(weights);
        const Var projected = tape.matmul(tape.matmul(weights, v), tape.parameter(att.out_w[hd]));
        mixed = hd == 0 ? projected : tape.add(mixed, projected);
    }
    mixed = tape.add_row(mixed, tape.parameter(att.out_b));
    const Var m = tape.layer_norm(tape.add(hidden, mixed), tape.parameter(params.ln1_gamma), tape.parameter(params.ln1_beta));

    const Var inner = tape.gelu(tape.add_row(tape.matmul(m, tape.parameter(params.ffn_in_w)), tape.parameter(params.ffn_in_b)));
    const Var ffn = tape.add_row(tape.matmul(inner, tape.parameter(params.ffn_out_w)), tape.parameter(params.ffn_out_b));
    out.hidden = tape.layer_norm(tape.add(m, ffn), tape.parameter(params.ln2_gamma), tape.parameter(params.ln2_beta));
    return out;
}

Matrix layer_forward(const Matrix& hidden, const LayerParams& params) {
    Tape tape;
    const Var h = tape.constant(hidden);
    return tape.value(layer_forward(tape, h, params).hidden);
}

Var run_layers(Tape& tape, const Model& model, Var hidden, std::size_t from, std::size_t to) {
    for (std::size_t i = from; i < to; ++i) {
        hidden = layer_forward(tape, hidden, model.layers.at(i)).hidden;
    }
    return hidden;
}

// ---------------------------------------------------------------------------

HeadOutput head_logits(Tape& tape, const Model& model, Var final_states) {
    const Matrix& states = tape.value(final_states);
    if (states.rows() == 0) {
        throw ContractError("head_logits: no final states (anchor missing)");
    }
    HeadOutput out;
    out.kind = model.config.head_kind;
    if (out.kind == HeadKind::classification) {
        const Var anchor = tape.gather_rows(final_states, {0});
        out.logits = tape.add_row(tape.matmul(anchor, tape.parameter(model.head.cls_w)), tape.parameter(model.head.cls_b));
    } else {
        out.logits = tape.matmul_nt(tape.parameter(model.head.span_start), final_states);
        out.end_logits = tape.matmul_nt(tape.parameter(model.head.span_end), final_states);
    }
    return out;
}

Prediction to_prediction(const Tape& tape, const HeadOutput& out) {
    Prediction p;
    p.kind = out.kind;
    const auto probs = [&](Var v) {
        const Matrix s = numerics::softmax_rows(tape.value(v));
        return std::vector<double>(s.data().begin(), s.data().end());
    };
    if (out.kind == HeadKind::classification) {
        p.class_probs = probs(out.logits);
    } else {
        p.start_probs = probs(out.logits);
        p.end_probs = probs(out.end_logits);
    }
    return p;
}

Prediction predict(const Model& model, const Matrix& final_states) {
    Tape tape;
    const Var states = tape.constant(final_states);
    return to_prediction(tape, head_logits(tape, model, states));
}

namespace {

Var gold_cross_entropy(Tape& tape, Var logits, std::size_t gold) {
    const std::size_t width = tape.value(logits).cols();
    if (gold >= width) {
        throw InputError("task_loss: gold index " + std::to_string(gold) + " outside " + std::to_string(width) + " outputs");
    }
    Matrix onehot(1, width);
    onehot(0, gold) = 1.0;
    const Var logp = tape.log(tape.softmax_rows(logits));
    return tape.scale(tape.sum(tape.mul(logp, tape.constant(std::move(onehot)))), -1.0);
}

} // namespace

Var task_loss(Tape& tape, const HeadOutput& out, const Label& gold) {
    if (out.kind == HeadKind::classification) {
        if (!std::holds_alternative<std::size_t>(gold)) {
            throw ContractError("task_loss: classification head needs a class label");
        }
        return gold_cross_entropy(tape, out.logits, std::get<std::size_t>(gold));
    }
    if (!std::holds_alternative<Span>(gold)) {
        throw ContractError("task_loss: span head needs a span label");
    }
    const Span s = std::get<Span>(gold);
    return tape.add(gold_cross_entropy(tape, out.logits, s.start), gold_cross_entropy(tape, out.end_logits, s.end));
}

double log_likelihood(const Prediction& pred, const Label& gold) {
    if (pred.kind == HeadKind::classification) {
        return std::log(pred.class_probs.at(std::get<std::size_t>(gold)));
    }
    const Span s = std::get<Span>(gold);
    return std::log(pred.start_probs.at(s.start)) + std::log(pred.end_probs.at(s.end));
}

Label decode(const Prediction& pred, std::size_t max_span) {
    if (pred.kind == HeadKind::classification) {
        const auto it = std::max_element(pred.class_probs.begin(), pred.class_probs.end());
        return static_cast<std::size_t>(it - pred.class_probs.begin());
    }
    const std::size_t n = pred.start_probs.size();
    Span best;
    double best_score = -1.0;
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t e = s; e < std::min(n, s + max_span); ++e) {
            const double v = pred.start_probs[s] * pred.end_probs[e];
            if (v > best_score) {
                best_score = v;
                best = {s, e};
            }
        }
    }
    return best;
}

double score(const Label& predicted, const Label& gold) {
    if (std::holds_alternative<std::size_t>(gold)) {
        return std::get<std::size_t>(predicted) == std::get<std::size_t>(gold) ? 1.0 : 0.0;
    }
    const Span p = std::get<Span>(predicted);
    const Span g = std::get<Span>(gold);
    const std::size_t lo = std::max(p.start, g.start);
    const std::size_t hi = std::min(p.end, g.end);
    if (hi < lo) {
        return 0.0;
    }
    const double overlap = static_cast<double>(hi - lo + 1);
    const double precision = overlap / static_cast<double>(p.end - p.start + 1);
    const double recall = overlap / static_cast<double>(g.end - g.start + 1);
    return 2.0 * precision * recall / (precision + recall);
}

// ---------------------------------------------------------------------------

std::size_t ModuleActions::selected_count() const {
    std::size_t count = 0;
    for (std::size_t i = 0; i < action.size(); ++i) {
        count += (action[i] != 0 && controlled[i] != 0) ? 1 : 0;
    }
    return count;
}

std::size_t ActionPlan::selected_count() const {
    std::size_t total = 0;
    for (const auto& m : modules) {
        total += m.selected_count();
    }
    return total;
}

TapedForward forward(Tape& tape, const Model& model, std::span<const int> token_ids, const ForwardOptions& options) {
    const std::size_t n = token_ids.size();
    if (n == 0 || n > model.config.max_len) {
        throw InputError("forward: sequence length " + std::to_string(n) + " outside [1, " +
                         std::to_string(model.config.max_len) + "]");
    }
    const std::vector<std::size_t>& positions = options.positions ? *options.positions : model.config.reduction_positions;
    const std::size_t num_layers = model.config.num_layers;

    TapedForward out;
    LayerTrace& trace = out.trace;
    std::vector<std::size_t> survivors(n);
    std::iota(survivors.begin(), survivors.end(), 0);
    trace.termination_layer.assign(n, num_layers);

    Var h = embed(tape, model, token_ids, survivors);
    out.hidden.push_back(h);
    trace.hidden.push_back(tape.value(h));
    trace.survivors.push_back(survivors);

    std::size_t module = 0;
    for (std::size_t layer = 0; layer < num_layers; ++layer) {
        if (module < positions.size() && positions[module] == layer) {
            if (options.gate != nullptr) {
                GateDecision decision = (*options.gate)(module, tape.value(h), survivors);
                if (decision.select.size() != survivors.size()) {
                    throw ContractError("forward: gate returned a mask of the wrong length");
                }
                ModuleActions rec;
                rec.position = layer;
                rec.survivors_in = survivors;
                rec.probs = std::move(decision.probs);
                rec.action = std::move(decision.select);
                rec.select = rec.action;
                rec.controlled.assign(survivors.size(), 1);
                const bool anchor_present = survivors.front() == 0;
                if (options.protect_anchor && anchor_present) {
                    rec.controlled[0] = 0;
                    rec.select[0] = 1;
                }
                if (std::none_of(rec.select.begin(), rec.select.end(), [](std::uint8_t s) { return s != 0; })) {
                    // Keep the prediction head total: the earliest survivor (the anchor when present) goes on.
                    rec.select[0] = 1;
                    rec.fallback = true;
                    trace.fallback_used = true;
                }
                std::vector<std::size_t> rows;
                std::vector<std::size_t> kept;
                for (std::size_t i = 0; i < survivors.size(); ++i) {
                    if (rec.select[i] != 0) {
                        rows.push_back(i);
                        kept.push_back(survivors[i]);
                    } else {
                        trace.termination_layer[survivors[i]] = layer;
                    }
                }
                // An all-Select gather is an exact row copy, so values stay bit-identical to the unreduced pass.
                h = tape.gather_rows(h, std::move(rows));
                survivors = std::move(kept);
                trace.plan.modules.push_back(std::move(rec));
            }
            ++module;
        }
        LayerOutput lo = layer_forward(tape, h, model.layers[layer]);
        h = lo.hidden;
        if (options.record_attention) {
            std::vector<Matrix> att;
            for (Var a : lo.attention) {
                att.push_back(tape.value(a));
            }
            trace.attention.push_back(std::move(att));
        }
        out.hidden.push_back(h);
        trace.hidden.push_back(tape.value(h));
        trace.survivors.push_back(survivors);
    }
    return out;
}

LayerTrace full_forward(const Model& model, std::span<const int> token_ids, bool record_attention) {
    Tape tape;
    ForwardOptions opts;
    opts.record_attention = record_attention;
    return std::move(forward(tape, model, token_ids, opts).trace);
}

} // namespace tokenprune::transformer
