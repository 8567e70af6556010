#pragma once

// The 5-student / 4-exercise / 3-concept instance used by the gradient suite.

#include <random>
#include <vector>

#include "kcd/model.hpp"
#include "kcd/train.hpp"

namespace kcd::testing {

struct ToyInstance {
    Matrix q;
    std::vector<Index> students;
    std::vector<Index> exercises;
    std::vector<int> labels;
};

inline ToyInstance toy_instance() {
    ToyInstance t;
    t.q = Matrix(4, 3);
    t.q << 1, 0, 0,
           0, 1, 1,
           1, 1, 0,
           0, 0, 1;
    for (Index s = 0; s < 5; ++s) {
        for (Index e = 0; e < 4; ++e) {
            t.students.push_back(s);
            t.exercises.push_back(e);
            t.labels.push_back(static_cast<int>((3 * s + 5 * e + s * e) % 3 != 0));
        }
    }
    return t;
}

inline ModelConfig toy_config(Variant v, std::uint64_t seed = 3) {
    ModelConfig c;
    c.variant = v;
    c.n_students = 5;
    c.n_exercises = 4;
    c.n_concepts = 3;
    c.seed = seed;
    return c;
}

// Training-mode loss with fixed Gumbel noise, so DINA is differentiable and
// repeatable.
inline Tensor toy_loss(const DiagnosisModel& model, const ToyInstance& t) {
    ForwardOptions opt;
    opt.mode = Mode::train;
    opt.noise_seed = 11;
    return bce_loss(forward(model, t.students, t.exercises, opt).prob, t.labels);
}

// Every parameter redrawn from N(0, scale), then projected, so gradients are
// checked away from the initialisation's special structure.
inline void randomise(DiagnosisModel& m, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (auto& p : m.parameters()) {
        Matrix& v = p.tensor.mutable_value();
        for (Index i = 0; i < v.size(); ++i) v.data()[i] = n(rng);
    }
    project_monotone(m);
}

}  // namespace kcd::testing
