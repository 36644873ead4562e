#pragma once

#include "convscm/matrix.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

// Reverse-mode differentiation over a graph recorded while the forward pass runs.
namespace convscm::ad {

struct Node {
    Matrix value;
    Matrix grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backprop;  // pushes this->grad into inputs

    Matrix& grad_buffer();
};

using NodePtr = std::shared_ptr<Node>;

class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    const Matrix& value() const { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }
    bool requires_grad() const { return node_->requires_grad; }
    const NodePtr& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    NodePtr node_;
};

// Leaf with no gradient.
Var constant(Matrix value);
Var scalar(double v);
// Leaf that collects a gradient (used for inputs in gradient checks).
Var variable(Matrix value);

// A persistent trainable leaf. Graphs built from it accumulate into grad().
class Parameter {
public:
    Parameter() = default;
    Parameter(std::string name, Matrix init);

    const std::string& name() const { return name_; }
    Var var() const { return Var(node_); }
    Matrix& value() { return node_->value; }
    const Matrix& value() const { return node_->value; }
    Matrix& grad() { return node_->grad_buffer(); }
    void zero_grad();
    Parameter clone() const;  // independent copy of name and value

private:
    std::string name_;
    NodePtr node_;
};

// Elementwise ops broadcast the second operand when it is 1x1, 1xC or Rx1.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var elu(const Var& a, double alpha = 1.0);
Var leaky_relu(const Var& a, double slope = 0.2);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);

// Row softmax restricted to entries where allow != 0; disallowed entries and empty rows are 0.
Var softmax_rows(const Var& a, const Matrix* allow = nullptr);
Var log_softmax_rows(const Var& a);
// LeakyReLU(a) / row-sum of LeakyReLU(a) over allowed entries, denominator magnitude clamped.
Var leaky_ratio_rows(const Var& a, const Matrix& allow, double slope, double clamp = 1e-8);
Var logsumexp_rows(const Var& a);
Var sum_rows(const Var& a);
Var l2_normalize_rows(const Var& a, double eps = 1e-6);

Var sum(const Var& a);
Var mean(const Var& a);

// (I - a)^-1 for strictly lower triangular a; gradient is projected onto the strict lower part.
Var unit_lower_inverse(const Var& a);
// Row t = ridge coefficients of keys[t] regressed on the keys of allowed predecessors:
// (K_P K_P^T + rho I)^-1 K_P k_t, zero outside allow(t, .).
Var ridge_attention(const Var& keys, const Matrix& allow, double rho);

// sum over entries of weight * BCE(sigmoid(logit), target).
Var bce_with_logits(const Var& logits, const Matrix& targets, const Matrix& weights);

// Multiplies by a fixed 0/(1/keep) mask.
Var apply_mask(const Var& a, const Matrix& mask);

// Propagates d(loss)/d(node) to every reachable node. loss must be 1x1.
void backward(const Var& loss);

}  // namespace convscm::ad
