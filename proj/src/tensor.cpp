#include "kcd/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace kcd {

namespace {

thread_local bool g_grad_enabled = true;

enum class Broadcast { same, a_scalar, b_scalar, a_row, b_row };

Broadcast broadcast_kind(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::same;
    if (a.size() == 1) return Broadcast::a_scalar;
    if (b.size() == 1) return Broadcast::b_scalar;
    if (a.rows() == 1 && a.cols() == b.cols()) return Broadcast::a_row;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::b_row;
    std::ostringstream msg;
    msg << op << ": incompatible shapes [" << a.rows() << "x" << a.cols() << "] and ["
        << b.rows() << "x" << b.cols() << "]";
    fail(ErrorKind::shape, msg.str());
}

Matrix expand(const Matrix& m, Index rows, Index cols) {
    if (m.rows() == rows && m.cols() == cols) return m;
    if (m.size() == 1) return Matrix::Constant(rows, cols, m(0, 0));
    return m.replicate(rows, 1);
}

// Sums a full-shape gradient back down to the operand's shape.
Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
    if (g.rows() == rows && g.cols() == cols) return g;
    if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
    return g.colwise().sum();
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double stable_softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
    Matrix out = a.value().unaryExpr(fwd);
    return make_result(std::move(out), {a}, [deriv](detail::Node& self) {
        auto& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Matrix local(in.value.rows(), in.value.cols());
        for (Index i = 0; i < local.size(); ++i) {
            local.data()[i] = deriv(in.value.data()[i], self.value.data()[i]);
        }
        in.accumulate(self.grad.cwiseProduct(local));
    });
}

}  // namespace

void detail::Node::accumulate(const Matrix& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::constant(Matrix value) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    return Tensor(std::move(node));
}

Tensor Tensor::parameter(Matrix value) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Tensor(std::move(node));
}

Matrix Tensor::grad() const {
    if (has_grad()) return node_->grad;
    return Matrix::Zero(rows(), cols());
}

Matrix& Tensor::mutable_grad() {
    if (!has_grad()) node_->grad = Matrix::Zero(rows(), cols());
    return node_->grad;
}

double Tensor::item() const {
    if (size() != 1) fail(ErrorKind::contract, "item() on non-scalar tensor " + shape_string(*this));
    return node_->value(0, 0);
}

Tensor Tensor::clone() const {
    auto node = std::make_shared<detail::Node>();
    node->value = node_->value;
    node->requires_grad = node_->requires_grad;
    return Tensor(std::move(node));
}

Tensor make_result(Matrix value, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward_fn) {
#ifndef NDEBUG
    if (!value.allFinite()) fail(ErrorKind::numeric, "non-finite value produced by a tensor op");
#endif
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    node->leaf = false;
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& t : inputs) needs = needs || t.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) node->inputs.push_back(t.node());
        node->backward = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

std::string shape_string(const Tensor& t) {
    std::ostringstream s;
    s << "[" << t.rows() << "x" << t.cols() << "]";
    return s.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        fail(ErrorKind::shape,
             "matmul: inner dimensions differ, " + shape_string(a) + " x " + shape_string(b));
    }
    Matrix out = a.value() * b.value();
    return make_result(std::move(out), {a, b}, [](detail::Node& self) {
        auto& lhs = *self.inputs[0];
        auto& rhs = *self.inputs[1];
        if (lhs.requires_grad) lhs.accumulate(self.grad * rhs.value.transpose());
        if (rhs.requires_grad) rhs.accumulate(lhs.value.transpose() * self.grad);
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    broadcast_kind(a.value(), b.value(), "add");
    const Index r = std::max(a.rows(), b.rows());
    const Index c = std::max(a.cols(), b.cols());
    Matrix out = expand(a.value(), r, c) + expand(b.value(), r, c);
    return make_result(std::move(out), {a, b}, [](detail::Node& self) {
        for (auto& in : self.inputs) {
            if (in->requires_grad) in->accumulate(reduce_to(self.grad, in->value.rows(), in->value.cols()));
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    broadcast_kind(a.value(), b.value(), "sub");
    const Index r = std::max(a.rows(), b.rows());
    const Index c = std::max(a.cols(), b.cols());
    Matrix out = expand(a.value(), r, c) - expand(b.value(), r, c);
    return make_result(std::move(out), {a, b}, [](detail::Node& self) {
        auto& lhs = *self.inputs[0];
        auto& rhs = *self.inputs[1];
        if (lhs.requires_grad) lhs.accumulate(reduce_to(self.grad, lhs.value.rows(), lhs.value.cols()));
        if (rhs.requires_grad) rhs.accumulate(reduce_to(-self.grad, rhs.value.rows(), rhs.value.cols()));
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    broadcast_kind(a.value(), b.value(), "mul");
    const Index r = std::max(a.rows(), b.rows());
    const Index c = std::max(a.cols(), b.cols());
    Matrix out = expand(a.value(), r, c).cwiseProduct(expand(b.value(), r, c));
    return make_result(std::move(out), {a, b}, [r, c](detail::Node& self) {
        auto& lhs = *self.inputs[0];
        auto& rhs = *self.inputs[1];
        if (lhs.requires_grad) {
            Matrix g = self.grad.cwiseProduct(expand(rhs.value, r, c));
            lhs.accumulate(reduce_to(g, lhs.value.rows(), lhs.value.cols()));
        }
        if (rhs.requires_grad) {
            Matrix g = self.grad.cwiseProduct(expand(lhs.value, r, c));
            rhs.accumulate(reduce_to(g, rhs.value.rows(), rhs.value.cols()));
        }
    });
}

Tensor scale(const Tensor& a, double factor) {
    Matrix out = a.value() * factor;
    return make_result(std::move(out), {a}, [factor](detail::Node& self) {
        self.inputs[0]->accumulate(self.grad * factor);
    });
}

Tensor shift(const Tensor& a, double offset) {
    Matrix out = a.value().array() + offset;
    return make_result(std::move(out), {a}, [](detail::Node& self) {
        self.inputs[0]->accumulate(self.grad);
    });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
    return unary(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    if ((a.value().array() <= 0.0).any()) {
        fail(ErrorKind::domain, "log: non-positive input in " + shape_string(a));
    }
    return unary(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        a, [](double x) { return stable_sigmoid(x); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
    return unary(
        a, [](double x) { return stable_softplus(x); },
        [](double x, double) { return stable_sigmoid(x); });
}

Tensor silu(const Tensor& a) {
    return unary(
        a, [](double x) { return x * stable_sigmoid(x); },
        [](double x, double) {
            const double s = stable_sigmoid(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    return unary(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
    Matrix out = Matrix::Constant(1, 1, a.value().sum());
    return make_result(std::move(out), {a}, [](detail::Node& self) {
        auto& in = *self.inputs[0];
        in.accumulate(Matrix::Constant(in.value.rows(), in.value.cols(), self.grad(0, 0)));
    });
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) fail(ErrorKind::contract, "mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor row_sum(const Tensor& a) {
    Matrix out = a.value().rowwise().sum();
    return make_result(std::move(out), {a}, [](detail::Node& self) {
        auto& in = *self.inputs[0];
        in.accumulate(self.grad.replicate(1, in.value.cols()));
    });
}

Tensor row_mean(const Tensor& a) {
    if (a.cols() == 0) fail(ErrorKind::contract, "row_mean of zero-width tensor");
    return scale(row_sum(a), 1.0 / static_cast<double>(a.cols()));
}

Tensor row_prod(const Tensor& a) {
    Matrix out = a.value().rowwise().prod();
    return make_result(std::move(out), {a}, [](detail::Node& self) {
        auto& in = *self.inputs[0];
        const Index rows = in.value.rows();
        const Index cols = in.value.cols();
        Matrix g(rows, cols);
        // Prefix/suffix products keep the rule exact when an entry is zero.
        std::vector<double> prefix(static_cast<std::size_t>(cols) + 1);
        for (Index r = 0; r < rows; ++r) {
            prefix[0] = 1.0;
            for (Index c = 0; c < cols; ++c) prefix[c + 1] = prefix[c] * in.value(r, c);
            double suffix = 1.0;
            for (Index c = cols - 1; c >= 0; --c) {
                g(r, c) = self.grad(r, 0) * prefix[c] * suffix;
                suffix *= in.value(r, c);
            }
        }
        in.accumulate(g);
    });
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
    if (s.cols() != 1 || s.rows() != a.rows()) {
        fail(ErrorKind::shape, "scale_rows: expected scale of shape [" + std::to_string(a.rows()) +
                                   "x1], got " + shape_string(s));
    }
    Matrix out = a.value().array().colwise() * s.value().col(0).array();
    return make_result(std::move(out), {a, s}, [](detail::Node& self) {
        auto& m = *self.inputs[0];
        auto& f = *self.inputs[1];
        if (m.requires_grad) {
            Matrix g = self.grad.array().colwise() * f.value.col(0).array();
            m.accumulate(g);
        }
        if (f.requires_grad) f.accumulate(self.grad.cwiseProduct(m.value).rowwise().sum());
    });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    const std::array<Tensor, 2> parts{a, b};
    return concat_cols(parts);
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) fail(ErrorKind::contract, "concat_cols of nothing");
    const Index rows = parts.front().rows();
    Index cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) {
            fail(ErrorKind::shape, "concat_cols: row counts differ, " + shape_string(parts.front()) +
                                       " vs " + shape_string(p));
        }
        cols += p.cols();
    }
    Matrix out(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return make_result(std::move(out), {parts.begin(), parts.end()}, [](detail::Node& self) {
        Index offset = 0;
        for (auto& in : self.inputs) {
            const Index w = in->value.cols();
            if (in->requires_grad) in->accumulate(self.grad.middleCols(offset, w));
            offset += w;
        }
    });
}

Tensor gather_rows(const Tensor& table, std::span<const Index> rows) {
    const Index n = table.rows();
    Matrix out(static_cast<Index>(rows.size()), table.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= n) {
            fail(ErrorKind::lookup, "row " + std::to_string(rows[i]) + " outside table of " +
                                        std::to_string(n) + " rows");
        }
        out.row(static_cast<Index>(i)) = table.value().row(rows[i]);
    }
    std::vector<Index> idx(rows.begin(), rows.end());
    return make_result(std::move(out), {table}, [idx = std::move(idx)](detail::Node& self) {
        auto& in = *self.inputs[0];
        if (in.grad.size() == 0) in.grad = Matrix::Zero(in.value.rows(), in.value.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            in.grad.row(idx[i]) += self.grad.row(static_cast<Index>(i));
        }
    });
}

Tensor slice_cols(const Tensor& a, Index begin, Index count) {
    if (begin < 0 || count < 0 || begin + count > a.cols()) {
        fail(ErrorKind::shape, "slice_cols: columns [" + std::to_string(begin) + ", " +
                                   std::to_string(begin + count) + ") outside " + shape_string(a));
    }
    Matrix out = a.value().middleCols(begin, count);
    return make_result(std::move(out), {a}, [begin, count](detail::Node& self) {
        auto& in = *self.inputs[0];
        if (in.grad.size() == 0) in.grad = Matrix::Zero(in.value.rows(), in.value.cols());
        in.grad.middleCols(begin, count) += self.grad;
    });
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        fail(ErrorKind::contract, "backward: loss must be a scalar, got " +
                                      (loss.defined() ? shape_string(loss) : std::string("undefined")));
    }
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS yields a topological order (inputs first).
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* node : order) {
        if (!node->leaf) node->grad = Matrix::Zero(node->value.rows(), node->value.cols());
    }
    loss.node()->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node& node = **it;
        if (node.backward && node.grad.size() != 0) node.backward(node);
    }
}

void zero_grads(std::span<Tensor> params) {
    for (auto& p : params) {
        if (p.defined()) p.mutable_grad().setZero();
    }
}

}  // namespace kcd
