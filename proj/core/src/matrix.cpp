#include "convscm/matrix.hpp"

#include "convscm/error.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace convscm {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows * cols, "Matrix: data length does not match shape");
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        require(r.size() == cols_, "Matrix: ragged initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
    return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

Matrix Matrix::transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix& Matrix::operator+=(const Matrix& o) {
    require(same_shape(o), "Matrix +=: shape mismatch " + shape_string() + " vs " + o.shape_string());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& o) {
    require(same_shape(o), "Matrix -=: shape mismatch " + shape_string() + " vs " + o.shape_string());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

double Matrix::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double Matrix::max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::abs(v));
    return m;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Matrix::shape_string() const {
    std::ostringstream os;
    os << rows_ << "x" << cols_;
    return os.str();
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.rows(), "matmul: inner dimensions differ " + a.shape_string() + " * " + b.shape_string());
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = po + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + p * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows(), "matmul_tn: row counts differ " + a.shape_string() + " / " + b.shape_string());
    Matrix out(a.cols(), b.cols());
    const std::size_t n = a.rows(), ka = a.cols(), m = b.cols();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t r = 0; r < n; ++r) {
        const double* brow = pb + r * m;
        for (std::size_t i = 0; i < ka; ++i) {
            const double av = pa[r * ka + i];
            if (av == 0.0) continue;
            double* orow = po + i * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.cols(), "matmul_nt: column counts differ " + a.shape_string() + " / " + b.shape_string());
    Matrix out(a.rows(), b.rows());
    const std::size_t k = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* arow = a.data().data() + i * k;
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* brow = b.data().data() + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            out(i, j) = s;
        }
    }
    return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "hadamard: shape mismatch");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
    return out;
}

bool is_strictly_lower(const Matrix& a, double tol) {
    if (a.rows() != a.cols()) return false;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i; j < a.cols(); ++j)
            if (std::abs(a(i, j)) > tol) return false;
    return true;
}

Matrix unit_lower_inverse(const Matrix& a) {
    require(a.rows() == a.cols(), "unit_lower_inverse: matrix is not square (" + a.shape_string() + ")");
    require(is_strictly_lower(a), "unit_lower_inverse: matrix is not strictly lower triangular");
    const std::size_t n = a.rows();
    // Row i of T = (I - A)^-1 satisfies T_i = e_i + sum_{k<i} A(i,k) T_k.
    Matrix t(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        t(i, i) = 1.0;
        for (std::size_t k = 0; k < i; ++k) {
            const double w = a(i, k);
            if (w == 0.0) continue;
            for (std::size_t j = 0; j <= k; ++j) t(i, j) += w * t(k, j);
        }
    }
    return t;
}

Matrix unit_lower_solve(const Matrix& a, const Matrix& b) {
    require(a.rows() == a.cols(), "unit_lower_solve: matrix is not square");
    require(a.rows() == b.rows(), "unit_lower_solve: shape mismatch " + a.shape_string() + " / " + b.shape_string());
    require(is_strictly_lower(a), "unit_lower_solve: matrix is not strictly lower triangular");
    Matrix x = b;
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto xi = x.row(i);
        for (std::size_t k = 0; k < i; ++k) {
            const double w = a(i, k);
            if (w == 0.0) continue;
            auto xk = x.row(k);
            for (std::size_t j = 0; j < x.cols(); ++j) xi[j] += w * xk[j];
        }
    }
    return x;
}

Matrix cholesky_solve(const Matrix& g, const Matrix& b) {
    const std::size_t n = g.rows();
    require(g.cols() == n && b.rows() == n, "cholesky_solve: shape mismatch");
    Matrix l(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = g(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            if (i == j) {
                if (!(s > 0.0)) throw NumericError("cholesky_solve: matrix is not positive definite");
                l(i, i) = std::sqrt(s);
            } else {
                l(i, j) = s / l(j, j);
            }
        }
    }
    Matrix x = b;
    for (std::size_t c = 0; c < x.cols(); ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, c);
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
            x(i, c) = s / l(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double s = x(ii, c);
            for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, c);
            x(ii, c) = s / l(ii, ii);
        }
    }
    return x;
}

double leaky_relu(double x, double slope) noexcept { return x >= 0.0 ? x : slope * x; }

double elu(double x, double alpha) noexcept { return x > 0.0 ? x : alpha * std::expm1(x); }

double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Matrix activate(const Matrix& x, Activation kind, ActivationOptions opt) {
    Matrix out = x;
    switch (kind) {
    case Activation::leaky_relu:
        for (double& v : out.data()) v = leaky_relu(v, opt.leaky_slope);
        break;
    case Activation::elu:
        for (double& v : out.data()) v = elu(v, opt.elu_alpha);
        break;
    case Activation::softmax_row:
        for (std::size_t r = 0; r < out.rows(); ++r) {
            auto row = out.row(r);
            if (row.empty()) continue;
            const double mx = *std::max_element(row.begin(), row.end());
            double s = 0.0;
            for (double& v : row) s += (v = std::exp(v - mx));
            for (double& v : row) v /= s;
        }
        break;
    }
    return out;
}

}  // namespace convscm
