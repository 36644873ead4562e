#include "convscm/autodiff.hpp"
#include "convscm/error.hpp"
#include "convscm/matrix.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace convscm;
namespace ad = convscm::ad;

namespace {

Matrix lower_allow(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j) m(i, j) = 1.0;
    return m;
}

std::vector<std::size_t> all_coords(const Matrix& m) {
    std::vector<std::size_t> v(m.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
    return v;
}

// Gradient of sum(weights .* op(x)) with respect to x, checked against central differences.
double op_grad_error(const std::function<ad::Var(const ad::Var&)>& op, Matrix x, std::uint64_t seed = 3,
                     std::vector<std::size_t> coords = {}) {
    SplitMix64 rng(seed);
    const ad::Var probe_out = op(ad::constant(x));
    const Matrix weights = oracle::random_matrix(probe_out.rows(), probe_out.cols(), rng);
    const ad::Var xv = ad::variable(x);
    ad::backward(ad::sum(ad::mul(op(xv), ad::constant(weights))));
    const Matrix analytic = xv.grad();
    auto f = [&] { return ad::sum(ad::mul(op(ad::constant(x)), ad::constant(weights))).value()(0, 0); };
    if (coords.empty()) coords = all_coords(x);
    return oracle::fd_max_rel_error(x, analytic, f, coords);
}

}  // namespace

TEST_SUITE("numerics") {

TEST_CASE("matrix basics") {
    const Matrix a{{1, 2}, {3, 4}};
    CHECK(a.rows() == 2);
    CHECK(a.cols() == 2);
    CHECK(a(1, 0) == 3);
    CHECK(a.transpose() == Matrix{{1, 3}, {2, 4}});
    CHECK(a.sum() == 10);
    CHECK(a.max_abs() == 4);
    CHECK(matmul(a, Matrix::identity(2)) == a);
    CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>{1, 2, 3}), ContractError);
    CHECK_THROWS_AS(matmul(a, Matrix(3, 1)), ContractError);
}

TEST_CASE("matmul variants agree with the naive product") {
    SplitMix64 rng(11);
    const Matrix a = oracle::random_matrix(4, 7, rng), b = oracle::random_matrix(7, 3, rng);
    const Matrix ref = oracle::naive_matmul(a, b);
    CHECK((matmul(a, b) - ref).max_abs() < 1e-12);
    CHECK((matmul_tn(a.transpose(), b) - ref).max_abs() < 1e-12);
    CHECK((matmul_nt(a, b.transpose()) - ref).max_abs() < 1e-12);
    CHECK(hadamard(Matrix{{1, 2}}, Matrix{{3, 4}}) == Matrix{{3, 8}});
}

TEST_CASE("unit_lower_inverse examples") {
    CHECK(unit_lower_inverse(Matrix(3, 3)) == Matrix::identity(3));
    CHECK(unit_lower_inverse(Matrix{{0, 0}, {0.5, 0}}) == Matrix{{1, 0}, {0.5, 1}});
    CHECK_THROWS_AS(unit_lower_inverse(Matrix(2, 3)), ContractError);
    CHECK_THROWS_AS(unit_lower_inverse(Matrix{{0, 0.1}, {0, 0}}), ContractError);
    CHECK_THROWS_AS(unit_lower_inverse(Matrix{{0.2, 0}, {0, 0}}), ContractError);
}

TEST_CASE("unit_lower_inverse multiplies back to identity") {
    SplitMix64 rng(5);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 10));
        const Matrix a = oracle::random_strictly_lower(n, rng);
        const Matrix inv = unit_lower_inverse(a);
        worst = std::max(worst, (matmul(Matrix::identity(n) - a, inv) - Matrix::identity(n)).max_abs());
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(inv(i, i) == 1.0);
            for (std::size_t j = i + 1; j < n; ++j) CHECK(inv(i, j) == 0.0);
        }
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("unit_lower_inverse matches a general inverse") {
    SplitMix64 rng(6);
    const Matrix a = oracle::random_strictly_lower(5, rng);
    CHECK((unit_lower_inverse(a) - oracle::inverse(Matrix::identity(5) - a)).max_abs() < 1e-10);
}

TEST_CASE("unit_lower_solve equals inverse times rhs") {
    SplitMix64 rng(7);
    const Matrix a = oracle::random_strictly_lower(6, rng);
    const Matrix b = oracle::random_matrix(6, 3, rng);
    CHECK((unit_lower_solve(a, b) - matmul(unit_lower_inverse(a), b)).max_abs() < 1e-12);
}

TEST_CASE("cholesky_solve") {
    const Matrix g{{4, 1}, {1, 3}};
    const Matrix x = cholesky_solve(g, Matrix{{1}, {2}});
    CHECK((matmul(g, x) - Matrix{{1}, {2}}).max_abs() < 1e-12);
    CHECK_THROWS_AS(cholesky_solve(Matrix{{1, 2}, {2, 1}}, Matrix{{1}, {1}}), NumericError);
}

TEST_CASE("activation examples") {
    CHECK(leaky_relu(-1.0, 0.2) == doctest::Approx(-0.2));
    CHECK(leaky_relu(2.0) == 2.0);
    CHECK(elu(0.0) == 0.0);
    CHECK(elu(1.5) == 1.5);
    CHECK(elu(-1.0) == doctest::Approx(std::exp(-1.0) - 1.0));
    const Matrix s = activate(Matrix{{0, 0, 0}}, Activation::softmax_row);
    for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
    CHECK(activate(Matrix{{-1, 2}}, Activation::leaky_relu) == Matrix{{-0.2, 2}});
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(sigmoid(-800.0) >= 0.0);
    CHECK(sigmoid(800.0) == 1.0);
}

TEST_CASE("softmax rows are distributions") {
    SplitMix64 rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const Matrix x = oracle::random_matrix(5, 7, rng, 10.0);
        const Matrix s = activate(x, Activation::softmax_row);
        for (std::size_t r = 0; r < s.rows(); ++r) {
            double total = 0.0;
            for (double v : s.row(r)) {
                CHECK(v >= 0.0);
                total += v;
            }
            CHECK(std::abs(total - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("backward examples") {
    ad::Parameter w("w", Matrix{{1, -2}, {3, 4}});
    ad::Parameter unused("u", Matrix{{5}});
    w.zero_grad();
    unused.zero_grad();
    ad::backward(ad::sum(w.var()));
    CHECK(w.grad() == Matrix(2, 2, 1.0));
    CHECK(unused.grad() == Matrix(1, 1, 0.0));
    CHECK_THROWS_AS(ad::backward(w.var()), ContractError);
}

TEST_CASE("every reachable node gets a gradient of its own shape") {
    SplitMix64 rng(9);
    const ad::Var x = ad::variable(oracle::random_matrix(3, 4, rng));
    const ad::Var w = ad::variable(oracle::random_matrix(4, 2, rng));
    const ad::Var y = ad::elu(ad::matmul(x, w));
    const ad::Var loss = ad::mean(ad::square(y));
    ad::backward(loss);
    std::vector<ad::NodePtr> stack{loss.node()};
    std::size_t visited = 0;
    while (!stack.empty()) {
        const ad::NodePtr n = stack.back();
        stack.pop_back();
        ++visited;
        CHECK(n->grad.same_shape(n->value));
        for (const auto& in : n->inputs) stack.push_back(in);
    }
    CHECK(visited >= 5);
}

TEST_CASE("parameter gradients accumulate until zeroed") {
    ad::Parameter w("w", Matrix{{2}});
    w.zero_grad();
    ad::backward(ad::sum(ad::square(w.var())));
    ad::backward(ad::sum(ad::square(w.var())));
    CHECK(w.grad()(0, 0) == doctest::Approx(8.0));
    w.zero_grad();
    CHECK(w.grad()(0, 0) == 0.0);
}

TEST_CASE("elementwise op gradients match finite differences") {
    SplitMix64 rng(10);
    const Matrix x = oracle::random_matrix(3, 4, rng);
    const Matrix other = oracle::random_matrix(3, 4, rng);
    const Matrix row = oracle::random_matrix(1, 4, rng);
    const Matrix col = oracle::random_matrix(3, 1, rng);
    Matrix pos = x;
    for (double& v : pos.data()) v = std::abs(v) + 0.5;

    CHECK(op_grad_error([&](const ad::Var& v) { return ad::add(v, ad::constant(other)); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::sub(ad::constant(other), v); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::mul(v, v); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::scale(v, -2.5); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::neg(ad::add_scalar(v, 3.0)); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::elu(v); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::leaky_relu(v, 0.2); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::sigmoid(v); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::exp(v); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::log(v); }, pos) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::square(v); }, x) < 1e-6);
    // broadcast operands receive reduced gradients
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::add(ad::constant(x), v); }, row) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::mul(ad::constant(x), v); }, col) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::mul(ad::constant(x), v); }, Matrix{{0.7}}) < 1e-6);
}

TEST_CASE("matrix op gradients match finite differences") {
    SplitMix64 rng(12);
    const Matrix x = oracle::random_matrix(3, 4, rng);
    const Matrix w = oracle::random_matrix(4, 5, rng);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::matmul(v, ad::constant(w)); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::matmul(ad::constant(x), v); }, w) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::transpose(v); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::sum_rows(v); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::mean(v); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::logsumexp_rows(v); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::log_softmax_rows(v); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::softmax_rows(v); }, x) < 1e-6);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::l2_normalize_rows(v); }, x) < 1e-6);
    const Matrix mask{{2, 0, 2, 2}, {0, 2, 2, 0}, {2, 2, 0, 2}};
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::apply_mask(v, mask); }, x) < 1e-6);
}

TEST_CASE("masked attention normalizers") {
    SplitMix64 rng(13);
    const Matrix allow = lower_allow(4);
    const Matrix x = oracle::random_matrix(4, 4, rng);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::softmax_rows(v, &allow); }, x) < 1e-6);
    Matrix pos = x;
    for (double& v : pos.data()) v = std::abs(v) + 0.3;
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::leaky_ratio_rows(v, allow, 0.2); }, pos) < 1e-6);

    const Matrix s = ad::softmax_rows(ad::constant(x), &allow).value();
    CHECK(is_strictly_lower(s));
    for (double v : s.row(0)) CHECK(v == 0.0);
    for (std::size_t r = 1; r < 4; ++r) {
        double total = 0.0;
        for (double v : s.row(r)) total += v;
        CHECK(std::abs(total - 1.0) < 1e-12);
    }
    const Matrix ratio = ad::leaky_ratio_rows(ad::constant(Matrix(3, 3, 1.0)), lower_allow(3), 0.2).value();
    CHECK(ratio(2, 0) == doctest::Approx(0.5));
    CHECK(ratio(2, 1) == doctest::Approx(0.5));
}

TEST_CASE("unit_lower_inverse gradient") {
    SplitMix64 rng(14);
    const Matrix a = oracle::random_strictly_lower(5, rng, -0.5, 0.5);
    std::vector<std::size_t> lower;
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < i; ++j) lower.push_back(i * 5 + j);
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::unit_lower_inverse(v); }, a, 3, lower) < 1e-6);
    const ad::Var av = ad::variable(a);
    ad::backward(ad::sum(ad::unit_lower_inverse(av)));
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = i; j < 5; ++j) CHECK(av.grad()(i, j) == 0.0);
}

TEST_CASE("ridge attention") {
    SplitMix64 rng(15);
    const std::size_t n = 5, d = 3;
    const Matrix keys = oracle::random_matrix(n, d, rng);
    const Matrix allow = lower_allow(n);
    const Matrix w = ad::ridge_attention(ad::constant(keys), allow, 1.0).value();
    CHECK(is_strictly_lower(w));
    // Row t solves (K_P K_P^T + I) a = K_P k_t over its predecessors.
    const std::size_t t = 3;
    Matrix kp(t, d), g(t, t), rhs(t, 1);
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t c = 0; c < d; ++c) kp(i, c) = keys(i, c);
    g = matmul_nt(kp, kp);
    for (std::size_t i = 0; i < t; ++i) {
        g(i, i) += 1.0;
        for (std::size_t c = 0; c < d; ++c) rhs(i, 0) += kp(i, c) * keys(t, c);
    }
    const Matrix expect = matmul(oracle::inverse(g), rhs);
    for (std::size_t i = 0; i < t; ++i) CHECK(w(t, i) == doctest::Approx(expect(i, 0)).epsilon(1e-10));
    CHECK(op_grad_error([&](const ad::Var& v) { return ad::ridge_attention(v, allow, 1.0); }, keys) < 1e-6);
}

TEST_CASE("bce_with_logits") {
    const Matrix logits{{0.0, 2.0}, {-1.0, 40.0}};
    const Matrix targets{{1.0, 0.0}, {1.0, 1.0}};
    const Matrix weights{{1.0, 1.0}, {0.0, 1.0}};
    const double v = ad::bce_with_logits(ad::constant(logits), targets, weights).value()(0, 0);
    const double expect = std::log(2.0) + (2.0 + std::log1p(std::exp(-2.0))) + std::log1p(std::exp(-40.0));
    CHECK(v == doctest::Approx(expect).epsilon(1e-12));
    SplitMix64 rng(16);
    CHECK(op_grad_error([&](const ad::Var& x) { return ad::bce_with_logits(x, targets, weights); },
                        oracle::random_matrix(2, 2, rng)) < 1e-6);
}

TEST_CASE("log requires positive input") {
    CHECK_THROWS_AS(ad::log(ad::constant(Matrix{{0.0}})), ContractError);
}

}  // TEST_SUITE
