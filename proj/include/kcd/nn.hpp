#pragma once

#include <random>
#include <span>
#include <vector>

#include "kcd/tensor.hpp"

namespace kcd {

/// Fully connected layer y = x W + b with W stored in x out. A monotone layer
/// keeps all weights non-negative via project_nonnegative().
struct Linear {
    Tensor weight;
    Tensor bias;
    bool monotone = false;

    Index n_in() const { return weight.rows(); }
    Index n_out() const { return weight.cols(); }
    Linear clone() const;
};

Linear make_linear(Index n_in, Index n_out, std::mt19937_64& rng, bool monotone = false);
Tensor linear_forward(const Linear& layer, const Tensor& x);
void project_nonnegative(Linear& layer);

/// FC stack with a sigmoid between consecutive layers (none after the last).
struct Mlp {
    std::vector<Linear> layers;
    Mlp clone() const;
};

Mlp make_mlp(std::span<const Index> widths, std::mt19937_64& rng, bool monotone);
Tensor mlp_forward(const Mlp& mlp, const Tensor& x);

/// Xavier-normal table, the usual embedding initialisation for these models.
Matrix xavier_normal(Index rows, Index cols, std::mt19937_64& rng);

}  // namespace kcd
