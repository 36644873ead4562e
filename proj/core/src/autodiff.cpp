#include "convscm/autodiff.hpp"

#include "convscm/error.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace convscm::ad {

Matrix& Node::grad_buffer() {
    if (!grad.same_shape(value)) grad = Matrix(value.rows(), value.cols());
    return grad;
}

namespace {

Var make(Matrix value, std::vector<NodePtr> inputs, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = std::any_of(inputs.begin(), inputs.end(), [](const NodePtr& p) { return p->requires_grad; });
    if (n->requires_grad) {
        n->inputs = std::move(inputs);
        n->backprop = std::move(backprop);
    }
    return Var(std::move(n));
}

void check_broadcast(const Matrix& a, const Matrix& b, const char* op) {
    const bool rows_ok = b.rows() == a.rows() || b.rows() == 1;
    const bool cols_ok = b.cols() == a.cols() || b.cols() == 1;
    require(rows_ok && cols_ok, std::string(op) + ": cannot broadcast " + b.shape_string() + " onto " + a.shape_string());
}

double bget(const Matrix& b, std::size_t r, std::size_t c) {
    return b(b.rows() == 1 ? 0 : r, b.cols() == 1 ? 0 : c);
}

// Sum g (shape of a) down to the shape of the broadcast operand.
void accumulate_reduced(Matrix& target, const Matrix& g, double sign = 1.0) {
    for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c)
            target(target.rows() == 1 ? 0 : r, target.cols() == 1 ? 0 : c) += sign * g(r, c);
}

template <class F>
Var unary(const Var& a, F f, std::function<void(Node&)> backprop) {
    Matrix out = a.value();
    for (double& v : out.data()) v = f(v);
    return make(std::move(out), {a.node()}, std::move(backprop));
}

void check_allow(const Matrix& x, const Matrix& allow, const char* op) {
    require(x.same_shape(allow), std::string(op) + ": mask shape mismatch");
}

}  // namespace

Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var scalar(double v) { return constant(Matrix(1, 1, v)); }

Var variable(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

Parameter::Parameter(std::string name, Matrix init) : name_(std::move(name)), node_(std::make_shared<Node>()) {
    node_->value = std::move(init);
    node_->requires_grad = true;
    node_->grad_buffer();
}

void Parameter::zero_grad() {
    auto& g = node_->grad_buffer();
    std::fill(g.data().begin(), g.data().end(), 0.0);
}

Parameter Parameter::clone() const { return Parameter(name_, node_->value); }

Var add(const Var& a, const Var& b) {
    check_broadcast(a.value(), b.value(), "add");
    Matrix out = a.value();
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bget(b.value(), r, c);
    return make(std::move(out), {a.node(), b.node()}, [](Node& s) {
        if (s.inputs[0]->requires_grad) s.inputs[0]->grad_buffer() += s.grad;
        if (s.inputs[1]->requires_grad) accumulate_reduced(s.inputs[1]->grad_buffer(), s.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_broadcast(a.value(), b.value(), "sub");
    Matrix out = a.value();
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) -= bget(b.value(), r, c);
    return make(std::move(out), {a.node(), b.node()}, [](Node& s) {
        if (s.inputs[0]->requires_grad) s.inputs[0]->grad_buffer() += s.grad;
        if (s.inputs[1]->requires_grad) accumulate_reduced(s.inputs[1]->grad_buffer(), s.grad, -1.0);
    });
}

Var mul(const Var& a, const Var& b) {
    check_broadcast(a.value(), b.value(), "mul");
    Matrix out = a.value();
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= bget(b.value(), r, c);
    return make(std::move(out), {a.node(), b.node()}, [](Node& s) {
        const Matrix& av = s.inputs[0]->value;
        const Matrix& bv = s.inputs[1]->value;
        if (s.inputs[0]->requires_grad) {
            Matrix& ga = s.inputs[0]->grad_buffer();
            for (std::size_t r = 0; r < ga.rows(); ++r)
                for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += s.grad(r, c) * bget(bv, r, c);
        }
        if (s.inputs[1]->requires_grad) {
            Matrix& gb = s.inputs[1]->grad_buffer();
            for (std::size_t r = 0; r < av.rows(); ++r)
                for (std::size_t c = 0; c < av.cols(); ++c)
                    gb(gb.rows() == 1 ? 0 : r, gb.cols() == 1 ? 0 : c) += s.grad(r, c) * av(r, c);
        }
    });
}

Var scale(const Var& a, double k) {
    return unary(a, [k](double v) { return k * v; }, [k](Node& s) {
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += k * s.grad.data()[i];
    });
}

Var add_scalar(const Var& a, double k) {
    return unary(a, [k](double v) { return v + k; }, [](Node& s) { s.inputs[0]->grad_buffer() += s.grad; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var matmul(const Var& a, const Var& b) {
    return make(convscm::matmul(a.value(), b.value()), {a.node(), b.node()}, [](Node& s) {
        if (s.inputs[0]->requires_grad) s.inputs[0]->grad_buffer() += matmul_nt(s.grad, s.inputs[1]->value);
        if (s.inputs[1]->requires_grad) s.inputs[1]->grad_buffer() += matmul_tn(s.inputs[0]->value, s.grad);
    });
}

Var transpose(const Var& a) {
    return make(a.value().transpose(), {a.node()}, [](Node& s) { s.inputs[0]->grad_buffer() += s.grad.transpose(); });
}

Var elu(const Var& a, double alpha) {
    return unary(a, [alpha](double v) { return convscm::elu(v, alpha); }, [alpha](Node& s) {
        const Matrix& x = s.inputs[0]->value;
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double xv = x.data()[i];
            g.data()[i] += s.grad.data()[i] * (xv > 0.0 ? 1.0 : alpha * std::exp(xv));
        }
    });
}

Var leaky_relu(const Var& a, double slope) {
    return unary(a, [slope](double v) { return convscm::leaky_relu(v, slope); }, [slope](Node& s) {
        const Matrix& x = s.inputs[0]->value;
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += s.grad.data()[i] * (x.data()[i] >= 0.0 ? 1.0 : slope);
    });
}

Var sigmoid(const Var& a) {
    return unary(a, [](double v) { return convscm::sigmoid(v); }, [](Node& s) {
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = s.value.data()[i];
            g.data()[i] += s.grad.data()[i] * y * (1.0 - y);
        }
    });
}

Var exp(const Var& a) {
    return unary(a, [](double v) { return std::exp(v); }, [](Node& s) {
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += s.grad.data()[i] * s.value.data()[i];
    });
}

Var log(const Var& a) {
    for (double v : a.value().data()) require(v > 0.0, "log: non-positive input");
    return unary(a, [](double v) { return std::log(v); }, [](Node& s) {
        const Matrix& x = s.inputs[0]->value;
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += s.grad.data()[i] / x.data()[i];
    });
}

Var square(const Var& a) {
    return unary(a, [](double v) { return v * v; }, [](Node& s) {
        const Matrix& x = s.inputs[0]->value;
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] += 2.0 * s.grad.data()[i] * x.data()[i];
    });
}

Var softmax_rows(const Var& a, const Matrix* allow) {
    if (allow) check_allow(a.value(), *allow, "softmax_rows");
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    auto allowed = [allow](std::size_t r, std::size_t c) { return !allow || (*allow)(r, c) != 0.0; };
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double mx = -INFINITY;
        for (std::size_t c = 0; c < x.cols(); ++c)
            if (allowed(r, c)) mx = std::max(mx, x(r, c));
        if (mx == -INFINITY) continue;
        double z = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c)
            if (allowed(r, c)) z += (out(r, c) = std::exp(x(r, c) - mx));
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) /= z;
    }
    return make(std::move(out), {a.node()}, [](Node& s) {
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < s.value.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < s.value.cols(); ++c) dot += s.grad(r, c) * s.value(r, c);
            for (std::size_t c = 0; c < s.value.cols(); ++c) g(r, c) += s.value(r, c) * (s.grad(r, c) - dot);
        }
    });
}

Var log_softmax_rows(const Var& a) {
    const Matrix& x = a.value();
    Matrix out = x;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        for (double& v : out.row(r)) v -= lse;
    }
    return make(std::move(out), {a.node()}, [](Node& s) {
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < s.value.rows(); ++r) {
            double total = 0.0;
            for (std::size_t c = 0; c < s.value.cols(); ++c) total += s.grad(r, c);
            for (std::size_t c = 0; c < s.value.cols(); ++c) g(r, c) += s.grad(r, c) - std::exp(s.value(r, c)) * total;
        }
    });
}

Var leaky_ratio_rows(const Var& a, const Matrix& allow, double slope, double clamp) {
    check_allow(a.value(), allow, "leaky_ratio_rows");
    const Matrix& x = a.value();
    Matrix out(x.rows(), x.cols());
    std::vector<double> denom(x.rows(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double s = 0.0;
        bool any = false;
        for (std::size_t c = 0; c < x.cols(); ++c)
            if (allow(r, c) != 0.0) {
                s += convscm::leaky_relu(x(r, c), slope);
                any = true;
            }
        if (!any) continue;
        if (std::abs(s) < clamp) s = std::copysign(clamp, s);
        denom[r] = s;
        for (std::size_t c = 0; c < x.cols(); ++c)
            if (allow(r, c) != 0.0) out(r, c) = convscm::leaky_relu(x(r, c), slope) / s;
    }
    return make(std::move(out), {a.node()}, [allow, slope, denom](Node& s) {
        const Matrix& xv = s.inputs[0]->value;
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < xv.rows(); ++r) {
            if (denom[r] == 0.0) continue;
            double dot = 0.0;
            for (std::size_t c = 0; c < xv.cols(); ++c) dot += s.grad(r, c) * s.value(r, c);
            for (std::size_t c = 0; c < xv.cols(); ++c)
                if (allow(r, c) != 0.0) {
                    const double d = xv(r, c) >= 0.0 ? 1.0 : slope;
                    g(r, c) += d * (s.grad(r, c) - dot) / denom[r];
                }
        }
    });
}

Var logsumexp_rows(const Var& a) {
    const Matrix& x = a.value();
    Matrix out(x.rows(), 1);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        out(r, 0) = mx + std::log(z);
    }
    return make(std::move(out), {a.node()}, [](Node& s) {
        const Matrix& xv = s.inputs[0]->value;
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < xv.rows(); ++r)
            for (std::size_t c = 0; c < xv.cols(); ++c) g(r, c) += s.grad(r, 0) * std::exp(xv(r, c) - s.value(r, 0));
    });
}

Var sum_rows(const Var& a) {
    const Matrix& x = a.value();
    Matrix out(x.rows(), 1);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (double v : x.row(r)) out(r, 0) += v;
    return make(std::move(out), {a.node()}, [](Node& s) {
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (double& v : g.row(r)) v += s.grad(r, 0);
    });
}

Var l2_normalize_rows(const Var& a, double eps) {
    const Matrix& x = a.value();
    Matrix out = x;
    std::vector<double> norms(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double n2 = 0.0;
        for (double v : x.row(r)) n2 += v * v;
        norms[r] = std::sqrt(n2);
        for (double& v : out.row(r)) v /= norms[r] + eps;
    }
    return make(std::move(out), {a.node()}, [norms, eps](Node& s) {
        const Matrix& xv = s.inputs[0]->value;
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < xv.rows(); ++r) {
            const double n = norms[r], d = n + eps;
            double dot = 0.0;
            for (std::size_t c = 0; c < xv.cols(); ++c) dot += xv(r, c) * s.grad(r, c);
            const double k = n > 0.0 ? dot / (n * d * d) : 0.0;
            for (std::size_t c = 0; c < xv.cols(); ++c) g(r, c) += s.grad(r, c) / d - xv(r, c) * k;
        }
    });
}

Var sum(const Var& a) {
    return make(Matrix(1, 1, a.value().sum()), {a.node()}, [](Node& s) {
        const double gv = s.grad(0, 0);
        for (double& v : s.inputs[0]->grad_buffer().data()) v += gv;
    });
}

Var mean(const Var& a) {
    require(a.value().size() > 0, "mean: empty matrix");
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var unit_lower_inverse(const Var& a) {
    return make(convscm::unit_lower_inverse(a.value()), {a.node()}, [](Node& s) {
        // d(A) = T^T G T^T, restricted to the free (strictly lower) entries.
        const Matrix& t = s.value;
        Matrix ga = matmul_tn(t, matmul_nt(s.grad, t));
        Matrix& g = s.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < i; ++j) g(i, j) += ga(i, j);
    });
}

namespace {

struct RidgeRow {
    std::vector<std::size_t> preds;
    Matrix gram;  // |P| x |P|
};

RidgeRow ridge_system(const Matrix& k, const Matrix& allow, std::size_t t, double rho) {
    RidgeRow rr;
    for (std::size_t j = 0; j < allow.cols(); ++j)
        if (allow(t, j) != 0.0) rr.preds.push_back(j);
    const std::size_t p = rr.preds.size();
    rr.gram = Matrix(p, p);
    for (std::size_t u = 0; u < p; ++u)
        for (std::size_t v = 0; v <= u; ++v) {
            double s = 0.0;
            auto ku = k.row(rr.preds[u]);
            auto kv = k.row(rr.preds[v]);
            for (std::size_t c = 0; c < k.cols(); ++c) s += ku[c] * kv[c];
            rr.gram(u, v) = rr.gram(v, u) = s + (u == v ? rho : 0.0);
        }
    return rr;
}

}  // namespace

Var ridge_attention(const Var& keys, const Matrix& allow, double rho) {
    const Matrix& k = keys.value();
    const std::size_t n = k.rows();
    require(allow.rows() == n && allow.cols() == n, "ridge_attention: mask must be N x N");
    require(rho > 0.0, "ridge_attention: rho must be positive");
    Matrix out(n, n);
    for (std::size_t t = 0; t < n; ++t) {
        RidgeRow rr = ridge_system(k, allow, t, rho);
        if (rr.preds.empty()) continue;
        Matrix rhs(rr.preds.size(), 1);
        for (std::size_t u = 0; u < rr.preds.size(); ++u) {
            auto ku = k.row(rr.preds[u]);
            auto kt = k.row(t);
            double s = 0.0;
            for (std::size_t c = 0; c < k.cols(); ++c) s += ku[c] * kt[c];
            rhs(u, 0) = s;
        }
        Matrix a = cholesky_solve(rr.gram, rhs);
        for (std::size_t u = 0; u < rr.preds.size(); ++u) out(t, rr.preds[u]) = a(u, 0);
    }
    return make(std::move(out), {keys.node()}, [allow, rho](Node& s) {
        const Matrix& k = s.inputs[0]->value;
        Matrix& gk = s.inputs[0]->grad_buffer();
        const std::size_t d = k.cols();
        for (std::size_t t = 0; t < k.rows(); ++t) {
            RidgeRow rr = ridge_system(k, allow, t, rho);
            const std::size_t p = rr.preds.size();
            if (p == 0) continue;
            Matrix ga(p, 1), a(p, 1);
            for (std::size_t u = 0; u < p; ++u) {
                ga(u, 0) = s.grad(t, rr.preds[u]);
                a(u, 0) = s.value(t, rr.preds[u]);
            }
            Matrix u_vec = cholesky_solve(rr.gram, ga);
            // rhs = K_P k_t and G = K_P K_P^T + rho I; with u = G^-1 dA:
            // dK_P += u k_t^T - u (K_P^T a)^T - a (K_P^T u)^T,  dk_t += K_P^T u.
            std::vector<double> ku(d, 0.0), ka(d, 0.0);
            for (std::size_t v = 0; v < p; ++v) {
                auto kv = k.row(rr.preds[v]);
                for (std::size_t c = 0; c < d; ++c) {
                    ku[c] += u_vec(v, 0) * kv[c];
                    ka[c] += a(v, 0) * kv[c];
                }
            }
            auto kt = k.row(t);
            for (std::size_t v = 0; v < p; ++v) {
                auto gj = gk.row(rr.preds[v]);
                for (std::size_t c = 0; c < d; ++c) gj[c] += u_vec(v, 0) * (kt[c] - ka[c]) - a(v, 0) * ku[c];
            }
            auto gt = gk.row(t);
            for (std::size_t c = 0; c < d; ++c) gt[c] += ku[c];
        }
    });
}

Var bce_with_logits(const Var& logits, const Matrix& targets, const Matrix& weights) {
    require(logits.value().same_shape(targets) && targets.same_shape(weights), "bce_with_logits: shape mismatch");
    const Matrix& x = logits.value();
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double w = weights.data()[i];
        if (w == 0.0) continue;
        const double xv = x.data()[i], y = targets.data()[i];
        total += w * (std::max(xv, 0.0) - xv * y + std::log1p(std::exp(-std::abs(xv))));
    }
    return make(Matrix(1, 1, total), {logits.node()}, [targets, weights](Node& s) {
        const Matrix& xv = s.inputs[0]->value;
        Matrix& g = s.inputs[0]->grad_buffer();
        const double gv = s.grad(0, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double w = weights.data()[i];
            if (w != 0.0) g.data()[i] += gv * w * (convscm::sigmoid(xv.data()[i]) - targets.data()[i]);
        }
    });
}

Var apply_mask(const Var& a, const Matrix& mask) { return mul(a, constant(mask)); }

void backward(const Var& loss) {
    require(static_cast<bool>(loss), "backward: empty variable");
    require(loss.rows() == 1 && loss.cols() == 1, "backward: loss must be scalar, got " + loss.value().shape_string());
    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->grad_buffer();
    loss.node()->grad(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

}  // namespace convscm::ad
