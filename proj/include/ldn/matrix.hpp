#pragma once

// Dense row-major matrices of 64-bit floats, the elementwise
// nonlinearities used across the project, and a SplitMix64-seeded
// normal generator. Everything is a plain value; no op mutates shared
// state.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "ldn/error.hpp"

namespace ldn {

inline std::string shape_string(int rows, int cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

class Matrix {
public:
    Matrix() = default;

    Matrix(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(checked_size(rows, cols), fill) {}

    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    // Literal construction, mostly for tests: Matrix::of({{1, 2}, {3, 4}}).
    static Matrix of(std::initializer_list<std::initializer_list<double>> rows) {
        const int r = static_cast<int>(rows.size());
        const int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
        Matrix m(r, c);
        int i = 0;
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != c)
                throw ShapeError("Matrix::of: ragged rows");
            int j = 0;
            for (double v : row) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    std::string shape() const { return shape_string(rows_, cols_); }
    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool operator==(const Matrix& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    static std::size_t checked_size(int rows, int cols) {
        if (rows < 1 || cols < 1)
            throw ShapeError("matrix dimensions must be positive, got " + shape_string(rows, cols));
        return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shapes disagree: " + a.shape() + " vs " + b.shape());
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions disagree: " + a.shape() + " x " + b.shape());
    Matrix c(a.rows(), b.cols());
    const int m = a.rows(), k = a.cols(), n = b.cols();
    for (int i = 0; i < m; ++i) {
        double* ci = c.data() + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = a(i, p);
            const double* bp = b.data() + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
    return c;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
    return c;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "sub");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
    return c;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
    return c;
}

inline Matrix scaled(const Matrix& a, double k) {
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] *= k;
    return c;
}

inline Matrix transpose(const Matrix& a) {
    Matrix c(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) c(j, i) = a(i, j);
    return c;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) { return add(a, b); }
inline Matrix operator-(const Matrix& a, const Matrix& b) { return sub(a, b); }

inline double max_abs(const Matrix& a) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i]));
    return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

// --- scalar nonlinearities ---------------------------------------------

// Overflow-safe softplus: identity above 30, exp below -30.
inline double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

enum class Unary { Softplus, Sigmoid, Tanh, Exp };

inline double apply_unary(Unary f, double x) {
    switch (f) {
        case Unary::Softplus: return softplus(x);
        case Unary::Sigmoid: return sigmoid(x);
        case Unary::Tanh: return std::tanh(x);
        case Unary::Exp: return std::exp(x);
    }
    throw InputError("apply_unary: unknown function");
}

inline Matrix elementwise(Unary f, const Matrix& x) {
    Matrix c = x;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = apply_unary(f, c[i]);
    return c;
}

// --- seeded randomness --------------------------------------------------

// SplitMix64 stream feeding Box-Muller normal sampling. Identical seed
// gives an identical value sequence within one build.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [0, n).
    int next_int(int n) {
        if (n < 1) throw InputError("SeededRng::next_int: n must be positive");
        return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
    }

    // Standard normal via Box-Muller; the sine mate of each pair is cached.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - next_unit(); // (0, 1], keeps the log finite
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline Matrix rand_normal(SeededRng& rng, int rows, int cols, double stddev) {
    if (stddev < 0.0) throw InputError("rand_normal: stddev must be nonnegative");
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = stddev * rng.next_normal();
    return m;
}

} // namespace ldn
