#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace tokenprune::numerics {

/// Dense row-major matrix of doubles. Vectors are 1×n rows or n×1 columns.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
    static Matrix identity(std::size_t n);
    static Matrix row_vector(std::span<const double> values);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }

    bool all_finite() const noexcept;
    bool same_shape(const Matrix& other) const noexcept { return rows_ == other.rows_ && cols_ == other.cols_; }

    // Bitwise element equality (shape included).
    friend bool operator==(const Matrix& a, const Matrix& b) noexcept {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Value-level primitives. Every reduction runs in a fixed order so repeated
// evaluation on the same inputs is bit-identical.

Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

Matrix add(const Matrix& a, const Matrix& b);
/// Adds the 1×c row `bias` to every row of `a`.
Matrix add_row(const Matrix& a, const Matrix& bias);
Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double factor);
Matrix gelu(const Matrix& a);
Matrix sigmoid(const Matrix& a);
Matrix softmax_rows(const Matrix& a);
Matrix log(const Matrix& a);
Matrix gather_rows(const Matrix& a, std::span<const std::size_t> rows);
Matrix concat_rows(std::span<const Matrix* const> parts);
double sum(const Matrix& a);
double mean(const Matrix& a);

inline constexpr double kLayerNormEps = 1e-12;

struct LayerNormResult {
    Matrix output;
    Matrix normalized;               // pre scale/shift
    std::vector<double> inv_std;     // per row
};

LayerNormResult layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta);

double gelu_scalar(double x) noexcept;
double gelu_derivative(double x) noexcept;
double sigmoid_scalar(double x) noexcept;

/// Counts 2·m·k·n FLOPs for every forward matmul executed on this thread while alive.
class MatmulFlopCounter {
public:
    MatmulFlopCounter();
    ~MatmulFlopCounter();
    MatmulFlopCounter(const MatmulFlopCounter&) = delete;
    MatmulFlopCounter& operator=(const MatmulFlopCounter&) = delete;

    std::uint64_t flops() const noexcept { return flops_; }
    void add(std::uint64_t f) noexcept { flops_ += f; }

private:
    std::uint64_t flops_ = 0;
    MatmulFlopCounter* previous_ = nullptr;
};

namespace detail {
// Uncounted kernels; the backward pass uses these directly.
void gemm_nn(const Matrix& a, const Matrix& b, Matrix& out);
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& out);
} // namespace detail

} // namespace tokenprune::numerics
