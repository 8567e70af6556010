#include "kcd/viz.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace kcd {

namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string fixed(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string node_id(std::size_t layer, Index unit) {
    return "n" + std::to_string(layer) + "_" + std::to_string(unit);
}

std::string node_label(const KanGraph& g, std::size_t layer, Index unit) {
    if (layer == 0) return "in" + std::to_string(unit);
    if (layer + 1 == g.widths.size()) return "out" + std::to_string(unit);
    return "h" + std::to_string(layer) + "." + std::to_string(unit);
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

double KanGraph::surviving_fraction() const {
    if (total_edges == 0) return 0.0;
    return static_cast<double>(edges.size()) / static_cast<double>(total_edges);
}

KanGraph build_kan_graph(const KanNetwork& net, const std::string& name, const Matrix& sample, double threshold) {
    if (threshold < 0.0) fail(ErrorKind::contract, "prune threshold must be non-negative");
    if (net.layers.empty()) fail(ErrorKind::config, "empty KAN network");
    KanGraph g;
    g.name = name;
    g.widths = net.widths();
    g.threshold = threshold;

    std::vector<Matrix> inputs;
    {
        NoGradGuard guard;
        for (const auto& t : kan_forward_traced(net, Tensor::constant(sample)).second) inputs.push_back(t.value());
    }
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const KanLayer& layer = net.layers[i];
        g.grids.push_back(layer.grid);
        const Matrix importance = edge_importance(layer, inputs[i]);
        const double top = importance.maxCoeff();
        g.total_edges += layer.n_in * layer.n_out;
        // Inputs in the outer loop so the edge list reads source-major.
        for (Index p = 0; p < layer.n_in; ++p) {
            for (Index q = 0; q < layer.n_out; ++q) {
                if (!edge_survives(importance(q, p), top, threshold)) continue;
                KanGraphEdge e;
                e.layer = static_cast<int>(i);
                e.from = p;
                e.to = q;
                e.importance = importance(q, p);
                for (int s = 0; s < curve_points; ++s) {
                    const double x = layer.grid.lo + (layer.grid.hi - layer.grid.lo) * s / (curve_points - 1);
                    e.curve.push_back(layer.phi(q, p, x));
                }
                g.max_importance = std::max(g.max_importance, e.importance);
                g.edges.push_back(std::move(e));
            }
        }
    }
    return g;
}

const KanNetwork& require_kan(const DiagnosisModel& model, const std::string& name) {
    if (auto it = model.kans.find(name); it != model.kans.end()) return it->second;
    if (model.kans.empty()) {
        fail(ErrorKind::capability,
             std::string(variant_name(model.variant())) + " has no KAN sub-networks to visualize");
    }
    std::string names;
    for (const auto& n : model.kan_names()) names += (names.empty() ? "" : ", ") + n;
    fail(ErrorKind::capability, std::string(variant_name(model.variant())) + " has no KAN named '" + name +
                                    "'; available: " + names);
}

Matrix kan_input_sample(const DiagnosisModel& model, const std::string& name, std::span<const Index> students,
                        std::span<const Index> exercises) {
    require_kan(model, name);
    if (students.empty()) fail(ErrorKind::contract, "KAN input sample needs at least one pair");
    NoGradGuard guard;
    ForwardOptions opt;
    opt.record_trace = true;
    auto trace = forward(model, students, exercises, opt).trace;
    auto it = trace.find("input:" + name);
    if (it == trace.end()) fail(ErrorKind::contract, "forward pass did not record the input of '" + name + "'");
    return std::move(it->second);
}

DiagnosisModel prune_model(const DiagnosisModel& model, std::span<const Index> students,
                           std::span<const Index> exercises, double threshold) {
    if (model.kans.empty()) {
        fail(ErrorKind::capability, std::string(variant_name(model.variant())) + " has no KAN sub-networks to prune");
    }
    DiagnosisModel out = clone_model(model);
    NoGradGuard guard;
    ForwardOptions opt;
    opt.record_trace = true;
    // All samples come from the unpruned model.
    const auto trace = forward(model, students, exercises, opt).trace;
    for (auto& [name, net] : out.kans) {
        const KanNetwork pruned = prune(model.kans.at(name), trace.at("input:" + name), threshold);
        for (std::size_t i = 0; i < net.layers.size(); ++i) {
            net.layers[i].spline_coeffs.mutable_value() = pruned.layers[i].spline_coeffs.value();
            net.layers[i].base_weight.mutable_value() = pruned.layers[i].base_weight.value();
        }
    }
    return out;
}

std::string to_dot(const KanGraph& g) {
    std::ostringstream o;
    o << "digraph \"" << escape(g.name) << "\" {\n";
    o << "  graph [rankdir=LR, label=\"" << escape(g.name) << ": " << g.edges.size() << " of " << g.total_edges
      << " edges at threshold " << num(g.threshold) << "\"];\n";
    o << "  node [shape=circle, fontsize=10];\n";
    for (std::size_t l = 0; l < g.widths.size(); ++l) {
        o << "  subgraph cluster_" << l << " {\n";
        o << "    label=\"" << (l == 0 ? "input" : l + 1 == g.widths.size() ? "output" : "hidden " + std::to_string(l))
          << "\";\n";
        for (Index u = 0; u < g.widths[l]; ++u) {
            o << "    " << node_id(l, u) << " [label=\"" << node_label(g, l, u) << "\"];\n";
        }
        o << "  }\n";
    }
    for (const auto& e : g.edges) {
        const double rel = g.max_importance > 0.0 ? e.importance / g.max_importance : 0.0;
        o << "  " << node_id(static_cast<std::size_t>(e.layer), e.from) << " -> "
          << node_id(static_cast<std::size_t>(e.layer) + 1, e.to) << " [importance=" << num(e.importance)
          << ", penwidth=" << fixed(0.5 + 4.5 * rel) << "];\n";
    }
    o << "}\n";
    return o.str();
}

std::string to_svg(const KanGraph& g) {
    constexpr double column = 240.0;
    constexpr double row = 36.0;
    constexpr double margin = 40.0;
    constexpr double radius = 11.0;
    constexpr double box_w = 44.0;
    constexpr double box_h = 22.0;
    const Index tallest = *std::max_element(g.widths.begin(), g.widths.end());
    const double width = 2 * margin + column * static_cast<double>(g.widths.size() - 1);
    const double height = 2 * margin + row * static_cast<double>(std::max<Index>(tallest - 1, 0)) + 20.0;

    auto pos = [&](std::size_t l, Index u) {
        const double offset = (static_cast<double>(tallest) - static_cast<double>(g.widths[l])) * row / 2.0;
        return std::pair{margin + column * static_cast<double>(l), margin + 20.0 + offset + row * static_cast<double>(u)};
    };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width) << "\" height=\"" << fixed(height)
      << "\" viewBox=\"0 0 " << fixed(width) << ' ' << fixed(height) << "\">\n";
    o << "<title>" << xml_escape(g.name) << "</title>\n";
    o << "<text x=\"" << fixed(margin) << "\" y=\"20\" font-size=\"12\">" << xml_escape(g.name) << ": " << g.edges.size()
      << " of " << g.total_edges << " edges at threshold " << num(g.threshold) << "</text>\n";
    for (const auto& e : g.edges) {
        const auto [x0, y0] = pos(static_cast<std::size_t>(e.layer), e.from);
        const auto [x1, y1] = pos(static_cast<std::size_t>(e.layer) + 1, e.to);
        const double rel = g.max_importance > 0.0 ? e.importance / g.max_importance : 0.0;
        o << "<g class=\"edge\">\n";
        o << "<line x1=\"" << fixed(x0) << "\" y1=\"" << fixed(y0) << "\" x2=\"" << fixed(x1) << "\" y2=\"" << fixed(y1)
          << "\" stroke=\"#345\" stroke-opacity=\"0.6\" stroke-width=\"" << fixed(0.5 + 4.5 * rel) << "\"/>\n";
        // phi over the grid range, drawn in a small box at the edge midpoint
        const double cx = (x0 + x1) / 2.0 - box_w / 2.0;
        const double cy = (y0 + y1) / 2.0 - box_h / 2.0;
        const auto [lo, hi] = std::minmax_element(e.curve.begin(), e.curve.end());
        const double span = *hi - *lo > 1e-12 ? *hi - *lo : 1.0;
        o << "<rect x=\"" << fixed(cx) << "\" y=\"" << fixed(cy) << "\" width=\"" << fixed(box_w) << "\" height=\""
          << fixed(box_h) << "\" fill=\"white\" stroke=\"#999\" stroke-width=\"0.5\"/>\n";
        o << "<polyline fill=\"none\" stroke=\"#c33\" stroke-width=\"1\" points=\"";
        for (std::size_t s = 0; s < e.curve.size(); ++s) {
            const double px = cx + 2.0 + (box_w - 4.0) * static_cast<double>(s) / static_cast<double>(e.curve.size() - 1);
            const double py = cy + box_h - 2.0 - (box_h - 4.0) * (e.curve[s] - *lo) / span;
            o << (s ? " " : "") << fixed(px) << ',' << fixed(py);
        }
        o << "\"/>\n</g>\n";
    }
    for (std::size_t l = 0; l < g.widths.size(); ++l) {
        for (Index u = 0; u < g.widths[l]; ++u) {
            const auto [x, y] = pos(l, u);
            o << "<circle cx=\"" << fixed(x) << "\" cy=\"" << fixed(y) << "\" r=\"" << fixed(radius)
              << "\" fill=\"#eef\" stroke=\"#335\"/>\n";
            o << "<text x=\"" << fixed(x) << "\" y=\"" << fixed(y + 3.5) << "\" font-size=\"9\" text-anchor=\"middle\">"
              << node_label(g, l, u) << "</text>\n";
        }
    }
    o << "</svg>\n";
    return o.str();
}

}  // namespace kcd
