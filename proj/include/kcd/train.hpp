#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "kcd/data.hpp"
#include "kcd/model.hpp"

namespace kcd {

// -- metrics ------------------------------------------------------------------

inline constexpr double prob_floor = 1e-7;

/// Mean binary cross-entropy with predictions clamped to
/// [prob_floor, 1 - prob_floor]. `predictions` is Bx1.
Tensor bce_loss(const Tensor& predictions, std::span<const int> labels);
double bce_value(std::span<const double> predictions, std::span<const int> labels);

/// Mann-Whitney statistic; ties count one half.
double auc(std::span<const double> scores, std::span<const int> labels);
/// Fraction of (score >= threshold) == label.
double acc(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);
/// Pearson correlation of average ranks.
double spearman(std::span<const double> a, std::span<const double> b);

struct Metrics {
    double auc = 0.0;
    double acc = 0.0;
    double loss = 0.0;
    Index n_evaluated = 0;
};

Metrics evaluate(const DiagnosisModel& model, std::span<const ResponseTriplet> logs);

// -- optimisation -------------------------------------------------------------

struct AdamConfig {
    double learning_rate = 0.002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    long step = 0;
};

AdamState make_adam_state(std::span<const Tensor> params);
/// One bias-corrected Adam update from the accumulated gradients.
void adam_step(std::span<const Tensor> params, AdamState& state, const AdamConfig& config);

enum class NoiseRedraw { per_batch, per_epoch };

struct TrainConfig {
    Index batch_size = 128;
    int epochs = 20;
    std::uint64_t seed = 0;
    AdamConfig adam;
    double temperature_start = 1.0;
    double temperature_end = 0.3;
    NoiseRedraw noise_redraw = NoiseRedraw::per_batch;
    bool project_monotone = true;
    bool evaluate_each_epoch = true;

    void validate() const;
    double temperature_at(int epoch) const;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    Metrics test;
    double wall_seconds = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;

    /// Equality of everything but wall time.
    bool same_results(const TrainHistory& other) const;
};

/// One JSON object per epoch.
void write_history(std::ostream& out, const TrainHistory& history);
TrainHistory read_history(std::istream& in);

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainHistory train(DiagnosisModel& model, const Dataset& data, const TrainConfig& config,
                   const EpochCallback& on_epoch = {});

/// Deterministic 64-bit mixing of a seed with a stream index.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace kcd
