#pragma once

#include <span>
#include <string>
#include <vector>

#include "kcd/kan.hpp"
#include "kcd/model.hpp"

namespace kcd {

struct KanGraphEdge {
    int layer = 0;
    Index from = 0;  // input unit of the layer
    Index to = 0;    // output unit of the layer
    double importance = 0.0;
    std::vector<double> curve;  // phi sampled evenly over the layer's grid range
};

/// The surviving structure of one KAN at a pruning threshold.
struct KanGraph {
    std::string name;
    std::vector<Index> widths;
    std::vector<SplineGrid> grids;  // per layer
    double threshold = 0.0;
    double max_importance = 0.0;
    std::vector<KanGraphEdge> edges;
    Index total_edges = 0;

    double surviving_fraction() const;
};

inline constexpr int curve_points = 16;

/// `sample` is the network input; deeper layers are scored on the inputs
/// they actually see, the same way prune() does.
KanGraph build_kan_graph(const KanNetwork& net, const std::string& name, const Matrix& sample,
                         double threshold);

/// The KAN called `name`, or a capability error naming the ones that exist.
const KanNetwork& require_kan(const DiagnosisModel& model, const std::string& name);

/// Input rows the KAN `name` receives over the given (student, exercise) pairs.
Matrix kan_input_sample(const DiagnosisModel& model, const std::string& name,
                        std::span<const Index> students, std::span<const Index> exercises);

/// Copy of the model with every KAN pruned at `threshold`, each scored on
/// what it sees over the given pairs.
DiagnosisModel prune_model(const DiagnosisModel& model, std::span<const Index> students,
                           std::span<const Index> exercises, double threshold);

std::string to_dot(const KanGraph& graph);
std::string to_svg(const KanGraph& graph);

}  // namespace kcd
