#pragma once

#include <array>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "kcd/error.hpp"

namespace kcd {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

namespace detail {

struct Node {
    Matrix value;
    Matrix grad;  // empty until the first accumulation
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this->grad and accumulates into the inputs that require grad.
    std::function<void(Node&)> backward;

    void accumulate(const Matrix& g);
};

}  // namespace detail

/// Handle to a node of the recorded computation.
///
/// Copies share the same node, so a parameter held by a model and the same
/// parameter referenced by a recorded graph see one value and one gradient.
/// Use clone() for an independent leaf. Values are 2-D; a scalar is 1x1 and a
/// batch of scalars is Bx1.
class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Matrix value);
    static Tensor parameter(Matrix value);
    static Tensor scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

    bool defined() const { return static_cast<bool>(node_); }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    Index size() const { return node_->value.size(); }
    std::array<Index, 2> shape() const { return {rows(), cols()}; }

    const Matrix& value() const { return node_->value; }
    /// Direct access for optimizers and loaders. Never call while a graph
    /// that reads this tensor is still to be back-propagated.
    Matrix& mutable_value() { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_->grad.size() != 0; }
    /// Gradient, or zeros of the value's shape if nothing accumulated yet.
    Matrix grad() const;
    Matrix& mutable_grad();

    double item() const;
    Tensor clone() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    friend Tensor make_result(Matrix value, std::vector<Tensor> inputs,
                              std::function<void(detail::Node&)> backward);

    std::shared_ptr<detail::Node> node_;
};

/// Builds an op result. When grad mode is off or no input requires grad the
/// inputs and backward rule are dropped and the result is a constant.
Tensor make_result(Matrix value, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward);

bool grad_enabled();

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

std::string shape_string(const Tensor& t);

// -- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

// -- elementwise; operands are equal-shaped, or one of them is 1x1, or one of
// them is 1xC against an RxC partner (repeated across rows) ---------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor shift(const Tensor& a, double offset);
Tensor neg(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
/// x * sigmoid(x)
Tensor silu(const Tensor& a);
/// Gradient passes where lo <= x <= hi, zero elsewhere.
Tensor clamp(const Tensor& a, double lo, double hi);

// -- reductions ---------------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor row_sum(const Tensor& a);
Tensor row_mean(const Tensor& a);
Tensor row_prod(const Tensor& a);

// -- structural ---------------------------------------------------------------

/// Scales row r of `a` (RxC) by `s(r, 0)` (Rx1). This is the only column-wise
/// broadcast and it has to be asked for by name.
Tensor scale_rows(const Tensor& a, const Tensor& s);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_cols(std::span<const Tensor> parts);
/// Row lookup; the one-hot-times-matrix product of an embedding layer.
Tensor gather_rows(const Tensor& table, std::span<const Index> rows);
Tensor slice_cols(const Tensor& a, Index begin, Index count);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double f) { return scale(a, f); }
inline Tensor operator*(double f, const Tensor& a) { return scale(a, f); }
inline Tensor operator+(const Tensor& a, double c) { return shift(a, c); }
inline Tensor operator+(double c, const Tensor& a) { return shift(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return shift(a, -c); }
inline Tensor operator-(double c, const Tensor& a) { return shift(neg(a), c); }

// -- gradient propagation -----------------------------------------------------

/// Accumulates d(loss)/d(t) into every reachable tensor that requires grad.
/// Leaf gradients accumulate across calls; intermediate ones are reset.
void backward(const Tensor& loss);

void zero_grads(std::span<Tensor> params);

}  // namespace kcd
