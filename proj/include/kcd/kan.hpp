#pragma once

#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "kcd/bspline.hpp"
#include "kcd/tensor.hpp"

namespace kcd {

/// Differentiable basis expansion. x is BxN; the result is Bx(N*L) with
/// column p*L + l holding B_l(x[:, p]).
Tensor bspline_basis(const Tensor& x, const SplineGrid& grid);

/// One KAN layer: every edge (q, p) carries
///   phi_qp(x) = base(q, p) * silu(x) + sum_l coeff(q, p, l) * B_l(x)
/// and output q sums phi_qp(x_p) over inputs p.
///
/// Storage is laid out for the batched contraction: spline_coeffs is
/// (n_in*L) x n_out with row p*L + l, and base_weight is n_in x n_out.
struct KanLayer {
    Index n_in = 0;
    Index n_out = 0;
    SplineGrid grid;
    Tensor spline_coeffs;
    Tensor base_weight;

    Index basis_count() const { return grid.basis_count(); }
    double coeff(Index q, Index p, Index l) const {
        return spline_coeffs.value()(p * basis_count() + l, q);
    }
    double& coeff(Index q, Index p, Index l) {
        return spline_coeffs.mutable_value()(p * basis_count() + l, q);
    }
    double base(Index q, Index p) const { return base_weight.value()(p, q); }
    double& base(Index q, Index p) { return base_weight.mutable_value()(p, q); }

    /// Scalar evaluation of one edge activation.
    double phi(Index q, Index p, double x) const;
    KanLayer clone() const;
};

enum class Renormalization {
    none,
    /// Layer i > 0 sees lo + (hi - lo) * sigmoid(previous output).
    affine_to_grid,
};

std::string_view renormalization_name(Renormalization mode);
Renormalization parse_renormalization(std::string_view name);

struct KanNetwork {
    std::vector<KanLayer> layers;
    Renormalization renorm = Renormalization::none;

    Index n_in() const { return layers.front().n_in; }
    Index n_out() const { return layers.back().n_out; }
    std::vector<Index> widths() const;
    KanNetwork clone() const;
};

KanLayer make_kan_layer(Index n_in, Index n_out, const SplineGrid& grid, std::mt19937_64& rng);
KanNetwork make_kan_network(std::span<const Index> widths, const SplineGrid& grid,
                            Renormalization renorm, std::mt19937_64& rng);

/// Batched forward: the basis tensor is built once per layer and contracted
/// with the coefficient matrix; no per-edge intermediates.
Tensor kan_layer_forward(const KanLayer& layer, const Tensor& x);
Tensor kan_forward(const KanNetwork& net, const Tensor& x);

/// Same as kan_forward, also returning the input each layer saw.
std::pair<Tensor, std::vector<Tensor>> kan_forward_traced(const KanNetwork& net, const Tensor& x);

/// Forward of a layer whose input row b is the one-hot vector e_{hot[b]}.
/// Equivalent to kan_layer_forward on the
/// dense one-hot batch but never materialises it.
Tensor kan_layer_forward_onehot(const KanLayer& layer, std::span<const Index> hot);

/// Mean |phi_qp(x_p)| over the sample rows; n_out x n_in.
Matrix edge_importance(const KanLayer& layer, const Matrix& sample);

/// An edge survives when its importance reaches threshold * (layer max). The
/// most important edges always survive, and at a positive threshold an edge
/// with zero importance never does.
bool edge_survives(double importance, double layer_max, double threshold);

struct PruneReport {
    std::vector<std::pair<Index, Index>> kept_total;  // per layer
};

/// Copy of `net` with non-surviving edges' parameters zeroed. `sample` is the
/// network input; deeper layers are scored on the inputs they actually see.
KanNetwork prune(const KanNetwork& net, const Matrix& sample, double threshold,
                 PruneReport* report = nullptr);

}  // namespace kcd
