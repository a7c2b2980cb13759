#include "tokenprune/matrix.hpp"

#include "tokenprune/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <string>

namespace tokenprune::numerics {

namespace {

thread_local MatmulFlopCounter* active_counter = nullptr;

[[noreturn]] void shape_fail(const char* op, const Matrix& a, const Matrix& b) {
    std::ostringstream os;
    os << op << ": incompatible shapes " << a.rows() << "x" << a.cols() << " and " << b.rows() << "x" << b.cols();
    throw ShapeError(os.str());
}

void count_flops(std::size_t m, std::size_t k, std::size_t n) {
    if (active_counter != nullptr) {
        active_counter->add(2ULL * m * k * n);
    }
}

} // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ShapeError("Matrix::from_rows: ragged rows");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

namespace detail {

namespace {

// C (m×n) += A·B where A is read through `a_at(i, k)`. Each output element accumulates its
// k terms in ascending order regardless of blocking, so results match the naive i-k-j loop.
template <class AAt>
void gemm_kernel(std::size_t m, std::size_t kk, std::size_t n, AAt a_at, const double* __restrict pb,
                 double* __restrict pc) {
    constexpr std::size_t kRows = 4;
    constexpr std::size_t kCols = 8;
    std::size_t i = 0;
    for (; i + kRows <= m; i += kRows) {
        std::size_t j = 0;
        for (; j + kCols <= n; j += kCols) {
            double acc[kRows][kCols];
            for (std::size_t r = 0; r < kRows; ++r) {
                for (std::size_t c = 0; c < kCols; ++c) {
                    acc[r][c] = pc[(i + r) * n + j + c];
                }
            }
            for (std::size_t k = 0; k < kk; ++k) {
                const double* brow = pb + k * n + j;
                for (std::size_t r = 0; r < kRows; ++r) {
                    const double av = a_at(i + r, k);
                    for (std::size_t c = 0; c < kCols; ++c) {
                        acc[r][c] += av * brow[c];
                    }
                }
            }
            for (std::size_t r = 0; r < kRows; ++r) {
                for (std::size_t c = 0; c < kCols; ++c) {
                    pc[(i + r) * n + j + c] = acc[r][c];
                }
            }
        }
        for (; j < n; ++j) {
            for (std::size_t r = 0; r < kRows; ++r) {
                double s = pc[(i + r) * n + j];
                for (std::size_t k = 0; k < kk; ++k) {
                    s += a_at(i + r, k) * pb[k * n + j];
                }
                pc[(i + r) * n + j] = s;
            }
        }
    }
    for (; i < m; ++i) {
        double* crow = pc + i * n;
        for (std::size_t k = 0; k < kk; ++k) {
            const double av = a_at(i, k);
            const double* brow = pb + k * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

} // namespace

void gemm_nn(const Matrix& a, const Matrix& b, Matrix& out) {
    const std::size_t kk = a.cols();
    const double* pa = a.data().data();
    gemm_kernel(
        a.rows(), kk, b.cols(), [pa, kk](std::size_t i, std::size_t k) { return pa[i * kk + k]; }, b.data().data(),
        out.data().data());
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& out) {
    const std::size_t m = a.cols();
    const double* pa = a.data().data();
    gemm_kernel(
        m, a.rows(), b.cols(), [pa, m](std::size_t i, std::size_t k) { return pa[k * m + i]; }, b.data().data(),
        out.data().data());
}

} // namespace detail

MatmulFlopCounter::MatmulFlopCounter() : previous_(active_counter) { active_counter = this; }

MatmulFlopCounter::~MatmulFlopCounter() { active_counter = previous_; }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        shape_fail("matmul", a, b);
    }
    Matrix out(a.rows(), b.cols());
    detail::gemm_nn(a, b, out);
    count_flops(a.rows(), a.cols(), b.cols());
    return out;
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        shape_fail("matmul_nt", a, b);
    }
    Matrix out(a.rows(), b.rows());
    detail::gemm_nn(a, transpose(b), out);
    count_flops(a.rows(), a.cols(), b.rows());
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        shape_fail("matmul_tn", a, b);
    }
    Matrix out(a.cols(), b.cols());
    detail::gemm_tn(a, b, out);
    count_flops(a.cols(), a.rows(), b.cols());
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        shape_fail("add", a, b);
    }
    Matrix out = a;
    auto o = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] += bd[i];
    }
    return out;
}

Matrix add_row(const Matrix& a, const Matrix& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols()) {
        shape_fail("add_row", a, bias);
    }
    Matrix out = a;
    const auto b = bias.row(0);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) {
            row[c] += b[c];
        }
    }
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        shape_fail("hadamard", a, b);
    }
    Matrix out = a;
    auto o = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] *= bd[i];
    }
    return out;
}

Matrix scale(const Matrix& a, double factor) {
    Matrix out = a;
    for (double& v : out.data()) {
        v *= factor;
    }
    return out;
}

double gelu_scalar(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) noexcept {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

double sigmoid_scalar(double x) noexcept {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Matrix gelu(const Matrix& a) {
    Matrix out = a;
    for (double& v : out.data()) {
        v = gelu_scalar(v);
    }
    return out;
}

Matrix sigmoid(const Matrix& a) {
    Matrix out = a;
    for (double& v : out.data()) {
        v = sigmoid_scalar(v);
    }
    return out;
}

Matrix softmax_rows(const Matrix& a) {
    Matrix out = a;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (double& v : row) {
            v = std::exp(v - mx);
            total += v;
        }
        for (double& v : row) {
            v /= total;
        }
    }
    return out;
}

Matrix log(const Matrix& a) {
    Matrix out = a;
    for (double& v : out.data()) {
        v = std::log(v);
    }
    return out;
}

Matrix gather_rows(const Matrix& a, std::span<const std::size_t> rows) {
    Matrix out(rows.size(), a.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= a.rows()) {
            throw ShapeError("gather_rows: index " + std::to_string(rows[i]) + " out of range for " +
                             std::to_string(a.rows()) + " rows");
        }
        std::copy_n(a.row(rows[i]).begin(), a.cols(), out.row(i).begin());
    }
    return out;
}

Matrix concat_rows(std::span<const Matrix* const> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    const std::size_t cols = parts.front()->cols();
    std::size_t rows = 0;
    for (const Matrix* p : parts) {
        if (p->cols() != cols) {
            shape_fail("concat_rows", *parts.front(), *p);
        }
        rows += p->rows();
    }
    std::vector<double> data;
    data.reserve(rows * cols);
    for (const Matrix* p : parts) {
        data.insert(data.end(), p->data().begin(), p->data().end());
    }
    return Matrix(rows, cols, std::move(data));
}

double sum(const Matrix& a) {
    double total = 0.0;
    for (double v : a.data()) {
        total += v;
    }
    return total;
}

double mean(const Matrix& a) {
    if (a.empty()) {
        throw ShapeError("mean: empty matrix");
    }
    return sum(a) / static_cast<double>(a.size());
}

LayerNormResult layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta) {
    if (gamma.rows() != 1 || gamma.cols() != x.cols()) {
        shape_fail("layer_norm", x, gamma);
    }
    if (!gamma.same_shape(beta)) {
        shape_fail("layer_norm", gamma, beta);
    }
    LayerNormResult res{Matrix(x.rows(), x.cols()), Matrix(x.rows(), x.cols()), std::vector<double>(x.rows())};
    const double width = static_cast<double>(x.cols());
    const auto g = gamma.row(0);
    const auto b = beta.row(0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto in = x.row(r);
        double mu = 0.0;
        for (double v : in) {
            mu += v;
        }
        mu /= width;
        double var = 0.0;
        for (double v : in) {
            var += (v - mu) * (v - mu);
        }
        var /= width;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        res.inv_std[r] = inv;
        auto norm = res.normalized.row(r);
        auto out = res.output.row(r);
        for (std::size_t c = 0; c < in.size(); ++c) {
            norm[c] = (in[c] - mu) * inv;
            out[c] = norm[c] * g[c] + b[c];
        }
    }
    return res;
}

} // namespace tokenprune::numerics
