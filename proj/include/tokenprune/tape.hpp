#pragma once

#include "tokenprune/matrix.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace tokenprune::numerics {

/// A named trainable matrix. Tapes reference parameters without copying them,
/// so a parameter must outlive every tape that records it.
struct Parameter {
    std::string name;
    Matrix value;
};

using GradientSet = std::map<std::string, Matrix>;

/// into += factor * g, creating entries as needed.
void accumulate(GradientSet& into, const GradientSet& g, double factor = 1.0);

enum class OpKind : std::uint8_t {
    constant,
    parameter,
    matmul,
    matmul_nt,
    add,
    add_row,
    mul,
    scale,
    gelu,
    sigmoid,
    log_sigmoid,
    softmax_rows,
    layer_norm,
    log,
    gather_rows,
    concat_rows,
    sum,
    mean,
};

struct Var {
    std::size_t id = 0;
};

/// Records primitive operations in execution order for reverse-mode differentiation.
/// One tape belongs to one logical execution context; it is not thread-safe.
class Tape {
public:
    Var constant(Matrix value);
    Var parameter(const Parameter& p);

    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);
    Var add(Var a, Var b);
    Var add_row(Var a, Var bias);
    Var mul(Var a, Var b);
    Var scale(Var a, double factor);
    Var gelu(Var a);
    Var sigmoid(Var a);
    /// log σ(a), finite for any finite a.
    Var log_sigmoid(Var a);
    Var softmax_rows(Var a);
    Var layer_norm(Var x, Var gamma, Var beta);
    Var log(Var a);
    Var gather_rows(Var a, std::vector<std::size_t> rows);
    Var concat_rows(std::span<const Var> parts);
    Var sum(Var a);
    Var mean(Var a);

    const Matrix& value(Var v) const;
    OpKind kind(Var v) const { return nodes_.at(v.id).op; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and propagates to every node that depends on a parameter.
    /// Throws ContractError when `loss` is not 1×1.
    void backward(Var loss);
    /// Gradient of the last backward() loss w.r.t. `v` (zeros when unreachable).
    Matrix gradient(Var v) const;
    /// Parameter gradients summed by name; parameters never reached get zeros.
    GradientSet parameter_gradients() const;

    /// Recomputes every non-leaf value from its recorded operands.
    void replay();

private:
    struct Node {
        OpKind op = OpKind::constant;
        std::vector<std::size_t> inputs;
        Matrix value;
        const Parameter* param = nullptr;
        double scalar = 0.0;
        std::vector<std::size_t> index;
        Matrix aux;
        std::vector<double> aux_vec;
        bool requires_grad = false;
    };

    Var push(Node node);
    Node make(OpKind op, std::initializer_list<Var> inputs) const;
    void evaluate(Node& node) const;
    void propagate(std::size_t id);

    std::vector<Node> nodes_;
    std::vector<Matrix> grads_;
    std::vector<bool> has_grad_;
};

/// Runs backward from `loss` and returns the gradient for every parameter recorded on the tape.
GradientSet grad(Tape& tape, Var loss);

} // namespace tokenprune::numerics
