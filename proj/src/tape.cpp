#include "tokenprune/tape.hpp"

#include "tokenprune/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tokenprune::numerics {

void accumulate(GradientSet& into, const GradientSet& g, double factor) {
    for (const auto& [name, m] : g) {
        auto it = into.find(name);
        if (it == into.end()) {
            into.emplace(name, scale(m, factor));
            continue;
        }
        auto dst = it->second.data();
        auto src = m.data();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] += factor * src[i];
        }
    }
}

namespace {

void add_into(Matrix& dst, const Matrix& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += s[i];
    }
}

} // namespace

Tape::Node Tape::make(OpKind op, std::initializer_list<Var> inputs) const {
    Node n;
    n.op = op;
    n.inputs.reserve(inputs.size());
    for (Var v : inputs) {
        if (v.id >= nodes_.size()) {
            throw ContractError("Tape: operand does not belong to this tape");
        }
        n.inputs.push_back(v.id);
        n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    return n;
}

Var Tape::push(Node node) {
    evaluate(node);
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
}

const Matrix& Tape::value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.param != nullptr ? n.param->value : n.value;
}

void Tape::evaluate(Node& n) const {
    auto in = [&](std::size_t i) -> const Matrix& { return value(Var{n.inputs[i]}); };
    switch (n.op) {
    case OpKind::constant:
    case OpKind::parameter:
        return;
    case OpKind::matmul:
        n.value = numerics::matmul(in(0), in(1));
        return;
    case OpKind::matmul_nt:
        n.value = numerics::matmul_nt(in(0), in(1));
        return;
    case OpKind::add:
        n.value = numerics::add(in(0), in(1));
        return;
    case OpKind::add_row:
        n.value = numerics::add_row(in(0), in(1));
        return;
    case OpKind::mul:
        n.value = numerics::hadamard(in(0), in(1));
        return;
    case OpKind::scale:
        n.value = numerics::scale(in(0), n.scalar);
        return;
    case OpKind::gelu:
        n.value = numerics::gelu(in(0));
        return;
    case OpKind::sigmoid:
        n.value = numerics::sigmoid(in(0));
        return;
    case OpKind::log_sigmoid: {
        n.value = in(0);
        for (double& v : n.value.data()) {
            v = std::min(v, 0.0) - std::log1p(std::exp(-std::abs(v)));
        }
        return;
    }
    case OpKind::softmax_rows:
        n.value = numerics::softmax_rows(in(0));
        return;
    case OpKind::layer_norm: {
        auto res = numerics::layer_norm(in(0), in(1), in(2));
        n.value = std::move(res.output);
        n.aux = std::move(res.normalized);
        n.aux_vec = std::move(res.inv_std);
        return;
    }
    case OpKind::log:
        n.value = numerics::log(in(0));
        return;
    case OpKind::gather_rows:
        n.value = numerics::gather_rows(in(0), n.index);
        return;
    case OpKind::concat_rows: {
        std::vector<const Matrix*> parts;
        parts.reserve(n.inputs.size());
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            parts.push_back(&in(i));
        }
        n.value = numerics::concat_rows(parts);
        return;
    }
    case OpKind::sum:
        n.value = Matrix(1, 1, numerics::sum(in(0)));
        return;
    case OpKind::mean:
        n.value = Matrix(1, 1, numerics::mean(in(0)));
        return;
    }
}

Var Tape::constant(Matrix value) {
    Node n;
    n.op = OpKind::constant;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Var Tape::parameter(const Parameter& p) {
    Node n;
    n.op = OpKind::parameter;
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Var Tape::matmul(Var a, Var b) { return push(make(OpKind::matmul, {a, b})); }
Var Tape::matmul_nt(Var a, Var b) { return push(make(OpKind::matmul_nt, {a, b})); }
Var Tape::add(Var a, Var b) { return push(make(OpKind::add, {a, b})); }
Var Tape::add_row(Var a, Var bias) { return push(make(OpKind::add_row, {a, bias})); }
Var Tape::mul(Var a, Var b) { return push(make(OpKind::mul, {a, b})); }

Var Tape::scale(Var a, double factor) {
    Node n = make(OpKind::scale, {a});
    n.scalar = factor;
    return push(std::move(n));
}

Var Tape::gelu(Var a) { return push(make(OpKind::gelu, {a})); }
Var Tape::sigmoid(Var a) { return push(make(OpKind::sigmoid, {a})); }
Var Tape::log_sigmoid(Var a) { return push(make(OpKind::log_sigmoid, {a})); }
Var Tape::softmax_rows(Var a) { return push(make(OpKind::softmax_rows, {a})); }
Var Tape::layer_norm(Var x, Var gamma, Var beta) { return push(make(OpKind::layer_norm, {x, gamma, beta})); }
Var Tape::log(Var a) { return push(make(OpKind::log, {a})); }

Var Tape::gather_rows(Var a, std::vector<std::size_t> rows) {
    Node n = make(OpKind::gather_rows, {a});
    n.index = std::move(rows);
    return push(std::move(n));
}

Var Tape::concat_rows(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    Node n = make(OpKind::concat_rows, {});
    for (Var v : parts) {
        if (v.id >= nodes_.size()) {
            throw ContractError("Tape: operand does not belong to this tape");
        }
        n.inputs.push_back(v.id);
        n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    return push(std::move(n));
}

Var Tape::sum(Var a) { return push(make(OpKind::sum, {a})); }
Var Tape::mean(Var a) { return push(make(OpKind::mean, {a})); }

void Tape::replay() {
    for (Node& n : nodes_) {
        evaluate(n);
    }
}

void Tape::backward(Var loss) {
    const Matrix& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) {
        throw ContractError("backward: loss must be a 1x1 scalar, got " + std::to_string(lv.rows()) + "x" +
                            std::to_string(lv.cols()));
    }
    grads_.assign(nodes_.size(), Matrix());
    has_grad_.assign(nodes_.size(), false);
    grads_[loss.id] = Matrix(1, 1, 1.0);
    has_grad_[loss.id] = true;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
        if (has_grad_[id] && nodes_[id].requires_grad) {
            propagate(id);
        }
    }
}

void Tape::propagate(std::size_t id) {
    const Node& n = nodes_[id];
    const Matrix& g = grads_[id];
    auto in = [&](std::size_t i) -> const Matrix& { return value(Var{n.inputs[i]}); };
    // Returns the gradient buffer of input i, or nullptr when it does not need one.
    auto target = [&](std::size_t i) -> Matrix* {
        const std::size_t src = n.inputs[i];
        if (!nodes_[src].requires_grad) {
            return nullptr;
        }
        if (!has_grad_[src]) {
            const Matrix& v = value(Var{src});
            grads_[src] = Matrix(v.rows(), v.cols());
            has_grad_[src] = true;
        }
        return &grads_[src];
    };

    switch (n.op) {
    case OpKind::constant:
    case OpKind::parameter:
        return;
    case OpKind::matmul: {
        if (Matrix* ga = target(0)) {
            detail::gemm_nn(g, transpose(in(1)), *ga);
        }
        if (Matrix* gb = target(1)) {
            detail::gemm_tn(in(0), g, *gb);
        }
        return;
    }
    case OpKind::matmul_nt: {
        if (Matrix* ga = target(0)) {
            detail::gemm_nn(g, in(1), *ga);
        }
        if (Matrix* gb = target(1)) {
            detail::gemm_tn(g, in(0), *gb);
        }
        return;
    }
    case OpKind::add: {
        if (Matrix* ga = target(0)) {
            add_into(*ga, g);
        }
        if (Matrix* gb = target(1)) {
            add_into(*gb, g);
        }
        return;
    }
    case OpKind::add_row: {
        if (Matrix* ga = target(0)) {
            add_into(*ga, g);
        }
        if (Matrix* gb = target(1)) {
            auto dst = gb->row(0);
            for (std::size_t r = 0; r < g.rows(); ++r) {
                const auto src = g.row(r);
                for (std::size_t c = 0; c < src.size(); ++c) {
                    dst[c] += src[c];
                }
            }
        }
        return;
    }
    case OpKind::mul: {
        if (Matrix* ga = target(0)) {
            add_into(*ga, hadamard(g, in(1)));
        }
        if (Matrix* gb = target(1)) {
            add_into(*gb, hadamard(g, in(0)));
        }
        return;
    }
    case OpKind::scale: {
        if (Matrix* ga = target(0)) {
            auto d = ga->data();
            auto s = g.data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                d[i] += n.scalar * s[i];
            }
        }
        return;
    }
    case OpKind::gelu: {
        if (Matrix* ga = target(0)) {
            auto d = ga->data();
            auto s = g.data();
            auto x = in(0).data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                d[i] += s[i] * gelu_derivative(x[i]);
            }
        }
        return;
    }
    case OpKind::log_sigmoid: {
        if (Matrix* ga = target(0)) {
            auto d = ga->data();
            auto s = g.data();
            auto x = in(0).data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                // d/dx log σ(x) = σ(−x)
                d[i] += s[i] / (1.0 + std::exp(x[i]));
            }
        }
        return;
    }
    case OpKind::sigmoid: {
        if (Matrix* ga = target(0)) {
            auto d = ga->data();
            auto s = g.data();
            auto y = n.value.data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                d[i] += s[i] * y[i] * (1.0 - y[i]);
            }
        }
        return;
    }
    case OpKind::softmax_rows: {
        if (Matrix* ga = target(0)) {
            for (std::size_t r = 0; r < g.rows(); ++r) {
                const auto y = n.value.row(r);
                const auto gy = g.row(r);
                double dot = 0.0;
                for (std::size_t c = 0; c < y.size(); ++c) {
                    dot += gy[c] * y[c];
                }
                auto dst = ga->row(r);
                for (std::size_t c = 0; c < y.size(); ++c) {
                    dst[c] += y[c] * (gy[c] - dot);
                }
            }
        }
        return;
    }
    case OpKind::layer_norm: {
        const Matrix& gamma = in(1);
        const Matrix& xhat = n.aux;
        const double width = static_cast<double>(xhat.cols());
        if (Matrix* gx = target(0)) {
            for (std::size_t r = 0; r < g.rows(); ++r) {
                const auto gy = g.row(r);
                const auto xh = xhat.row(r);
                double mean_d = 0.0;
                double mean_dx = 0.0;
                for (std::size_t c = 0; c < gy.size(); ++c) {
                    const double d = gy[c] * gamma(0, c);
                    mean_d += d;
                    mean_dx += d * xh[c];
                }
                mean_d /= width;
                mean_dx /= width;
                auto dst = gx->row(r);
                for (std::size_t c = 0; c < gy.size(); ++c) {
                    const double d = gy[c] * gamma(0, c);
                    dst[c] += n.aux_vec[r] * (d - mean_d - xh[c] * mean_dx);
                }
            }
        }
        if (Matrix* gg = target(1)) {
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < g.cols(); ++c) {
                    (*gg)(0, c) += g(r, c) * xhat(r, c);
                }
            }
        }
        if (Matrix* gb = target(2)) {
            for (std::size_t r = 0; r < g.rows(); ++r) {
                for (std::size_t c = 0; c < g.cols(); ++c) {
                    (*gb)(0, c) += g(r, c);
                }
            }
        }
        return;
    }
    case OpKind::log: {
        if (Matrix* ga = target(0)) {
            auto d = ga->data();
            auto s = g.data();
            auto x = in(0).data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                d[i] += s[i] / x[i];
            }
        }
        return;
    }
    case OpKind::gather_rows: {
        if (Matrix* ga = target(0)) {
            for (std::size_t i = 0; i < n.index.size(); ++i) {
                auto dst = ga->row(n.index[i]);
                const auto src = g.row(i);
                for (std::size_t c = 0; c < src.size(); ++c) {
                    dst[c] += src[c];
                }
            }
        }
        return;
    }
    case OpKind::concat_rows: {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            const std::size_t rows = in(i).rows();
            if (Matrix* gi = target(i)) {
                for (std::size_t r = 0; r < rows; ++r) {
                    auto dst = gi->row(r);
                    const auto src = g.row(offset + r);
                    for (std::size_t c = 0; c < src.size(); ++c) {
                        dst[c] += src[c];
                    }
                }
            }
            offset += rows;
        }
        return;
    }
    case OpKind::sum:
    case OpKind::mean: {
        if (Matrix* ga = target(0)) {
            const double s = n.op == OpKind::sum ? g(0, 0) : g(0, 0) / static_cast<double>(ga->size());
            for (double& v : ga->data()) {
                v += s;
            }
        }
        return;
    }
    }
}

Matrix Tape::gradient(Var v) const {
    if (v.id < has_grad_.size() && has_grad_[v.id]) {
        return grads_[v.id];
    }
    const Matrix& val = value(v);
    return Matrix(val.rows(), val.cols());
}

GradientSet Tape::parameter_gradients() const {
    GradientSet out;
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
        const Node& n = nodes_[id];
        if (n.op != OpKind::parameter) {
            continue;
        }
        auto it = out.find(n.param->name);
        if (it == out.end()) {
            it = out.emplace(n.param->name, Matrix(n.param->value.rows(), n.param->value.cols())).first;
        }
        if (id < has_grad_.size() && has_grad_[id]) {
            add_into(it->second, grads_[id]);
        }
    }
    return out;
}

GradientSet grad(Tape& tape, Var loss) {
    tape.backward(loss);
    return tape.parameter_gradients();
}

} // namespace tokenprune::numerics
