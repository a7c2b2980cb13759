#pragma once

#include <stdexcept>
#include <string>

namespace tokenprune {

// Operand dimensions do not line up.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A caller broke a documented precondition (non-scalar loss, missing record, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Bad user-supplied input: token ids out of range, empty sequences, unreadable files.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid hyperparameter combination.
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Training left the sane region (see the divergence guard in the pipeline).
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace tokenprune
