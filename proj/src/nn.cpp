#include "kcd/nn.hpp"

#include <cmath>

namespace kcd {

Linear Linear::clone() const {
    Linear copy = *this;
    copy.weight = weight.clone();
    copy.bias = bias.clone();
    return copy;
}

Linear make_linear(Index n_in, Index n_out, std::mt19937_64& rng, bool monotone) {
    if (n_in <= 0 || n_out <= 0) fail(ErrorKind::config, "linear layer widths must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(n_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix w(n_in, n_out);
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = monotone ? std::abs(dist(rng)) : dist(rng);
    Matrix b(1, n_out);
    for (Index i = 0; i < b.size(); ++i) b.data()[i] = dist(rng);
    return Linear{Tensor::parameter(std::move(w)), Tensor::parameter(std::move(b)), monotone};
}

Tensor linear_forward(const Linear& layer, const Tensor& x) {
    return matmul(x, layer.weight) + layer.bias;
}

void project_nonnegative(Linear& layer) {
    layer.weight.mutable_value() = layer.weight.value().cwiseMax(0.0);
}

Mlp Mlp::clone() const {
    Mlp copy;
    for (const auto& l : layers) copy.layers.push_back(l.clone());
    return copy;
}

Mlp make_mlp(std::span<const Index> widths, std::mt19937_64& rng, bool monotone) {
    if (widths.size() < 2) fail(ErrorKind::config, "an MLP needs at least two widths");
    Mlp mlp;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        mlp.layers.push_back(make_linear(widths[i], widths[i + 1], rng, monotone));
        if (monotone && i > 0) {
            // Non-negative weights over sigmoid outputs would start the unit
            // deep in saturation; centre it on the mean input of 0.5 instead.
            Linear& l = mlp.layers.back();
            l.bias.mutable_value() = -0.5 * l.weight.value().colwise().sum();
        }
    }
    return mlp;
}

Tensor mlp_forward(const Mlp& mlp, const Tensor& x) {
    Tensor h = x;
    for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
        if (i > 0) h = sigmoid(h);
        h = linear_forward(mlp.layers[i], h);
    }
    return h;
}

Matrix xavier_normal(Index rows, Index cols, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(rows + cols)));
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

}  // namespace kcd
