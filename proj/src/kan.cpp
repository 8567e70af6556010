#include "kcd/kan.hpp"

#include <cmath>

namespace kcd {

namespace {

double logistic(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

Tensor renormalize(const Tensor& x, const SplineGrid& grid) {
    return shift(scale(sigmoid(x), grid.hi - grid.lo), grid.lo);
}

}  // namespace

Tensor bspline_basis(const Tensor& x, const SplineGrid& grid) {
    grid.validate();
    const Index batch = x.rows();
    const Index width = x.cols();
    const int L = grid.basis_count();
    const int p = grid.degree;
    Matrix out = Matrix::Zero(batch, width * L);
    // Per-entry first index and slopes for the backward rule.
    std::vector<int> first(static_cast<std::size_t>(x.size()));
    std::vector<double> slopes(static_cast<std::size_t>(x.size()) * static_cast<std::size_t>(p + 1));
    for (Index b = 0; b < batch; ++b) {
        for (Index j = 0; j < width; ++j) {
            const auto w = bspline_window(grid, x.value()(b, j));
            const std::size_t e = static_cast<std::size_t>(b * width + j);
            first[e] = w.first;
            for (int r = 0; r <= p; ++r) {
                out(b, j * L + w.first + r) = w.value[r];
                slopes[e * static_cast<std::size_t>(p + 1) + static_cast<std::size_t>(r)] = w.slope[r];
            }
        }
    }
    return make_result(
        std::move(out), {x},
        [first = std::move(first), slopes = std::move(slopes), width, L, p](detail::Node& self) {
            auto& in = *self.inputs[0];
            Matrix g = Matrix::Zero(in.value.rows(), width);
            for (Index b = 0; b < g.rows(); ++b) {
                for (Index j = 0; j < width; ++j) {
                    const std::size_t e = static_cast<std::size_t>(b * width + j);
                    double acc = 0.0;
                    for (int r = 0; r <= p; ++r) {
                        acc += self.grad(b, j * L + first[e] + r) *
                               slopes[e * static_cast<std::size_t>(p + 1) + static_cast<std::size_t>(r)];
                    }
                    g(b, j) = acc;
                }
            }
            in.accumulate(g);
        });
}

double KanLayer::phi(Index q, Index p, double x) const {
    const auto w = bspline_window(grid, x);
    double spline = 0.0;
    for (int r = 0; r <= grid.degree; ++r) spline += coeff(q, p, w.first + r) * w.value[r];
    return base(q, p) * x * logistic(x) + spline;
}

KanLayer KanLayer::clone() const {
    KanLayer copy = *this;
    copy.spline_coeffs = spline_coeffs.clone();
    copy.base_weight = base_weight.clone();
    return copy;
}

std::string_view renormalization_name(Renormalization mode) {
    return mode == Renormalization::none ? "none" : "affine_to_grid";
}

Renormalization parse_renormalization(std::string_view name) {
    if (name == "none") return Renormalization::none;
    if (name == "affine_to_grid" || name == "affine-to-grid") return Renormalization::affine_to_grid;
    fail(ErrorKind::config, "unknown renormalization mode '" + std::string(name) + "'");
}

std::vector<Index> KanNetwork::widths() const {
    std::vector<Index> w;
    if (layers.empty()) return w;
    w.push_back(layers.front().n_in);
    for (const auto& l : layers) w.push_back(l.n_out);
    return w;
}

KanNetwork KanNetwork::clone() const {
    KanNetwork copy;
    copy.renorm = renorm;
    for (const auto& l : layers) copy.layers.push_back(l.clone());
    return copy;
}

KanLayer make_kan_layer(Index n_in, Index n_out, const SplineGrid& grid, std::mt19937_64& rng) {
    grid.validate();
    if (n_in <= 0 || n_out <= 0) fail(ErrorKind::config, "KAN layer widths must be positive");
    KanLayer layer;
    layer.n_in = n_in;
    layer.n_out = n_out;
    layer.grid = grid;
    const Index L = grid.basis_count();
    std::normal_distribution<double> coeff_dist(0.0, 0.1 / std::sqrt(static_cast<double>(L)));
    const double bound = 1.0 / std::sqrt(static_cast<double>(n_in));
    std::uniform_real_distribution<double> base_dist(-bound, bound);
    Matrix coeffs(n_in * L, n_out);
    for (Index i = 0; i < coeffs.size(); ++i) coeffs.data()[i] = coeff_dist(rng);
    Matrix base(n_in, n_out);
    for (Index i = 0; i < base.size(); ++i) base.data()[i] = base_dist(rng);
    layer.spline_coeffs = Tensor::parameter(std::move(coeffs));
    layer.base_weight = Tensor::parameter(std::move(base));
    return layer;
}

KanNetwork make_kan_network(std::span<const Index> widths, const SplineGrid& grid,
                            Renormalization renorm, std::mt19937_64& rng) {
    if (widths.size() < 2) fail(ErrorKind::config, "a KAN needs at least an input and an output width");
    KanNetwork net;
    net.renorm = renorm;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        net.layers.push_back(make_kan_layer(widths[i], widths[i + 1], grid, rng));
    }
    return net;
}

Tensor kan_layer_forward(const KanLayer& layer, const Tensor& x) {
    if (x.cols() != layer.n_in) {
        fail(ErrorKind::shape, "KAN layer expects width " + std::to_string(layer.n_in) + ", got " +
                                   shape_string(x));
    }
    Tensor spline = matmul(bspline_basis(x, layer.grid), layer.spline_coeffs);
    Tensor residual = matmul(silu(x), layer.base_weight);
    return spline + residual;
}

std::pair<Tensor, std::vector<Tensor>> kan_forward_traced(const KanNetwork& net, const Tensor& x) {
    if (net.layers.empty()) fail(ErrorKind::config, "empty KAN network");
    std::vector<Tensor> inputs;
    Tensor h = x;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        if (i > 0) {
            if (net.layers[i - 1].n_out != net.layers[i].n_in) {
                fail(ErrorKind::shape, "KAN layer widths disagree between layers " +
                                           std::to_string(i - 1) + " and " + std::to_string(i));
            }
            if (net.renorm == Renormalization::affine_to_grid) h = renormalize(h, net.layers[i].grid);
        }
        inputs.push_back(h);
        h = kan_layer_forward(net.layers[i], h);
    }
    return {h, std::move(inputs)};
}

Tensor kan_forward(const KanNetwork& net, const Tensor& x) { return kan_forward_traced(net, x).first; }

Tensor kan_layer_forward_onehot(const KanLayer& layer, std::span<const Index> hot) {
    const Index L = layer.basis_count();
    const Index batch = static_cast<Index>(hot.size());
    for (Index h : hot) {
        if (h < 0 || h >= layer.n_in) {
            fail(ErrorKind::lookup, "one-hot index " + std::to_string(h) + " outside layer width " +
                                        std::to_string(layer.n_in));
        }
    }
    // Every input is 0 except the hot one, which is 1:
    //   out_q = sum_p phi_qp(0) + (phi_q,hot(1) - phi_q,hot(0)).
    const auto zero_row = bspline_row(layer.grid, 0.0);
    const auto one_row = bspline_row(layer.grid, 1.0);
    const double silu_one = logistic(1.0);  // silu(0) = 0

    const Matrix& C = layer.spline_coeffs.value();
    const Matrix& W = layer.base_weight.value();
    Eigen::Map<const Eigen::RowVectorXd> b0(zero_row.data(), L);
    Eigen::Map<const Eigen::RowVectorXd> b1(one_row.data(), L);
    const Eigen::RowVectorXd delta = b1 - b0;

    Eigen::RowVectorXd offset = Eigen::RowVectorXd::Zero(layer.n_out);
    for (Index p = 0; p < layer.n_in; ++p) offset += b0 * C.middleRows(p * L, L);
    Matrix out(batch, layer.n_out);
    for (Index b = 0; b < batch; ++b) {
        const Index p = hot[static_cast<std::size_t>(b)];
        out.row(b) = offset + delta * C.middleRows(p * L, L) + silu_one * W.row(p);
    }
    std::vector<Index> idx(hot.begin(), hot.end());
    return make_result(
        std::move(out), {layer.spline_coeffs, layer.base_weight},
        [idx = std::move(idx), b0 = Eigen::RowVectorXd(b0), delta, silu_one, L](detail::Node& self) {
            auto& coeffs = *self.inputs[0];
            auto& base = *self.inputs[1];
            const Eigen::RowVectorXd total = self.grad.colwise().sum();
            if (coeffs.requires_grad) {
                Matrix g = Matrix::Zero(coeffs.value.rows(), coeffs.value.cols());
                const Index n_in = coeffs.value.rows() / L;
                for (Index p = 0; p < n_in; ++p) g.middleRows(p * L, L) = b0.transpose() * total;
                for (std::size_t b = 0; b < idx.size(); ++b) {
                    g.middleRows(idx[b] * L, L) +=
                        delta.transpose() * self.grad.row(static_cast<Index>(b));
                }
                coeffs.accumulate(g);
            }
            if (base.requires_grad) {
                Matrix g = Matrix::Zero(base.value.rows(), base.value.cols());
                for (std::size_t b = 0; b < idx.size(); ++b) {
                    g.row(idx[b]) += silu_one * self.grad.row(static_cast<Index>(b));
                }
                base.accumulate(g);
            }
        });
}

Matrix edge_importance(const KanLayer& layer, const Matrix& sample) {
    if (sample.rows() == 0) fail(ErrorKind::contract, "edge_importance needs a non-empty sample");
    if (sample.cols() != layer.n_in) {
        fail(ErrorKind::shape, "edge_importance: sample width " + std::to_string(sample.cols()) +
                                   " vs layer input " + std::to_string(layer.n_in));
    }
    Matrix importance = Matrix::Zero(layer.n_out, layer.n_in);
    for (Index b = 0; b < sample.rows(); ++b) {
        for (Index p = 0; p < layer.n_in; ++p) {
            const double x = sample(b, p);
            const auto w = bspline_window(layer.grid, x);
            const double residual = x * logistic(x);
            for (Index q = 0; q < layer.n_out; ++q) {
                double v = layer.base(q, p) * residual;
                for (int r = 0; r <= layer.grid.degree; ++r) v += layer.coeff(q, p, w.first + r) * w.value[r];
                importance(q, p) += std::abs(v);
            }
        }
    }
    return importance / static_cast<double>(sample.rows());
}

bool edge_survives(double importance, double layer_max, double threshold) {
    if (threshold <= 0.0) return true;
    if (importance <= 0.0) return false;
    return importance >= std::min(threshold * layer_max, layer_max);
}

KanNetwork prune(const KanNetwork& net, const Matrix& sample, double threshold, PruneReport* report) {
    if (threshold < 0.0) fail(ErrorKind::contract, "prune threshold must be non-negative");
    KanNetwork out = net.clone();
    std::vector<Matrix> inputs;
    {
        NoGradGuard guard;
        auto traced = kan_forward_traced(net, Tensor::constant(sample));
        for (const auto& t : traced.second) inputs.push_back(t.value());
    }
    if (report) report->kept_total.clear();
    for (std::size_t i = 0; i < out.layers.size(); ++i) {
        KanLayer& layer = out.layers[i];
        const Matrix importance = edge_importance(net.layers[i], inputs[i]);
        const double top = importance.maxCoeff();
        Index kept = 0;
        for (Index q = 0; q < layer.n_out; ++q) {
            for (Index p = 0; p < layer.n_in; ++p) {
                if (edge_survives(importance(q, p), top, threshold)) {
                    ++kept;
                    continue;
                }
                layer.base(q, p) = 0.0;
                for (Index l = 0; l < layer.basis_count(); ++l) layer.coeff(q, p, l) = 0.0;
            }
        }
        if (report) report->kept_total.emplace_back(kept, layer.n_in * layer.n_out);
    }
    return out;
}

}  // namespace kcd
