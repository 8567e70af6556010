#include "kcd/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include <json.hpp>

namespace kcd {

namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        fail(ErrorKind::shape, std::string(what) + ": " + std::to_string(a) + " scores but " +
                                   std::to_string(b) + " labels");
    }
}

std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based average
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

Tensor bce_loss(const Tensor& predictions, std::span<const int> labels) {
    check_lengths(static_cast<std::size_t>(predictions.rows()), labels.size(), "bce_loss");
    if (predictions.cols() != 1) fail(ErrorKind::shape, "bce_loss expects Bx1 predictions, got " + shape_string(predictions));
    Matrix y(predictions.rows(), 1);
    for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Index>(i), 0) = labels[i];
    const Tensor r = Tensor::constant(std::move(y));
    const Tensor p = clamp(predictions, prob_floor, 1.0 - prob_floor);
    return -mean(r * log(p) + (1.0 - r) * log(1.0 - p));
}

double bce_value(std::span<const double> predictions, std::span<const int> labels) {
    check_lengths(predictions.size(), labels.size(), "bce");
    if (predictions.empty()) fail(ErrorKind::contract, "bce of an empty batch");
    double total = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double p = std::clamp(predictions[i], prob_floor, 1.0 - prob_floor);
        total -= labels[i] ? std::log(p) : std::log(1.0 - p);
    }
    return total / static_cast<double>(predictions.size());
}

double auc(std::span<const double> scores, std::span<const int> labels) {
    check_lengths(scores.size(), labels.size(), "auc");
    const auto ranks = average_ranks(scores);
    double positives = 0.0;
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i]) {
            positives += 1.0;
            rank_sum += ranks[i];
        }
    }
    const double negatives = static_cast<double>(labels.size()) - positives;
    if (positives == 0.0 || negatives == 0.0) {
        fail(ErrorKind::metric, "AUC is undefined when only one class is present");
    }
    return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

double acc(std::span<const double> scores, std::span<const int> labels, double threshold) {
    check_lengths(scores.size(), labels.size(), "acc");
    if (scores.empty()) fail(ErrorKind::contract, "accuracy of an empty set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if ((scores[i] >= threshold ? 1 : 0) == (labels[i] ? 1 : 0)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(scores.size());
}

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) fail(ErrorKind::shape, "spearman needs equal-length inputs");
    if (a.size() < 2) fail(ErrorKind::metric, "spearman needs at least two points");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0;
    double saa = 0.0;
    double sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) fail(ErrorKind::metric, "spearman is undefined for a constant input");
    return sab / std::sqrt(saa * sbb);
}

Metrics evaluate(const DiagnosisModel& model, std::span<const ResponseTriplet> logs) {
    if (logs.empty()) fail(ErrorKind::contract, "nothing to evaluate");
    std::vector<double> scores;
    std::vector<int> labels;
    scores.reserve(logs.size());
    constexpr std::size_t chunk = 4096;
    for (std::size_t at = 0; at < logs.size(); at += chunk) {
        const std::size_t end = std::min(logs.size(), at + chunk);
        std::vector<Index> s;
        std::vector<Index> e;
        for (std::size_t i = at; i < end; ++i) {
            s.push_back(logs[i].student);
            e.push_back(logs[i].exercise);
            labels.push_back(logs[i].score);
        }
        const Vector p = predict(model, s, e);
        scores.insert(scores.end(), p.data(), p.data() + p.size());
    }
    Metrics m;
    m.auc = auc(scores, labels);
    m.acc = acc(scores, labels);
    m.loss = bce_value(scores, labels);
    m.n_evaluated = static_cast<Index>(logs.size());
    return m;
}

AdamState make_adam_state(std::span<const Tensor> params) {
    AdamState state;
    for (const auto& p : params) {
        state.m.push_back(Matrix::Zero(p.rows(), p.cols()));
        state.v.push_back(Matrix::Zero(p.rows(), p.cols()));
    }
    return state;
}

void adam_step(std::span<const Tensor> params, AdamState& state, const AdamConfig& config) {
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        fail(ErrorKind::contract, "Adam state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                                      std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].rows() != params[i].rows() || state.m[i].cols() != params[i].cols()) {
            fail(ErrorKind::contract, "Adam state shape does not match parameter " + std::to_string(i) + " " +
                                          shape_string(params[i]));
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor p = params[i];
        if (!p.has_grad()) continue;
        const Matrix& g = p.mutable_grad();
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g.cwiseProduct(g);
        p.mutable_value().array() -=
            config.learning_rate * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + config.epsilon);
    }
}

void TrainConfig::validate() const {
    if (batch_size < 1) fail(ErrorKind::config, "batch_size must be at least 1");
    if (epochs < 1) fail(ErrorKind::config, "epochs must be at least 1");
    if (!(adam.learning_rate > 0.0)) fail(ErrorKind::config, "learning rate must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
        fail(ErrorKind::config, "Adam betas must lie in [0, 1)");
    }
    if (!(adam.epsilon > 0.0)) fail(ErrorKind::config, "Adam epsilon must be positive");
    if (!(temperature_start > 0.0 && temperature_end > 0.0)) {
        fail(ErrorKind::config, "Gumbel temperatures must be positive");
    }
}

double TrainConfig::temperature_at(int epoch) const {
    if (epochs <= 1) return temperature_start;
    const double f = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
    return temperature_start + (temperature_end - temperature_start) * f;
}

bool TrainHistory::same_results(const TrainHistory& other) const {
    if (epochs.size() != other.epochs.size()) return false;
    for (std::size_t i = 0; i < epochs.size(); ++i) {
        const auto& a = epochs[i];
        const auto& b = other.epochs[i];
        if (a.epoch != b.epoch || a.train_loss != b.train_loss || a.test.auc != b.test.auc ||
            a.test.acc != b.test.acc || a.test.loss != b.test.loss || a.test.n_evaluated != b.test.n_evaluated) {
            return false;
        }
    }
    return true;
}

void write_history(std::ostream& out, const TrainHistory& history) {
    for (const auto& r : history.epochs) {
        nlohmann::json j;
        j["epoch"] = r.epoch;
        j["train_loss"] = r.train_loss;
        j["test_auc"] = r.test.auc;
        j["test_acc"] = r.test.acc;
        j["test_loss"] = r.test.loss;
        j["n_test"] = r.test.n_evaluated;
        j["wall_seconds"] = r.wall_seconds;
        out << j.dump() << '\n';
    }
}

TrainHistory read_history(std::istream& in) {
    TrainHistory h;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            EpochRecord r;
            r.epoch = j.at("epoch").get<int>();
            r.train_loss = j.at("train_loss").get<double>();
            r.test.auc = j.at("test_auc").get<double>();
            r.test.acc = j.at("test_acc").get<double>();
            r.test.loss = j.at("test_loss").get<double>();
            r.test.n_evaluated = j.at("n_test").get<Index>();
            r.wall_seconds = j.at("wall_seconds").get<double>();
            h.epochs.push_back(r);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::parse, "history line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return h;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finaliser over the combined value
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

TrainHistory train(DiagnosisModel& model, const Dataset& data, const TrainConfig& config,
                   const EpochCallback& on_epoch) {
    config.validate();
    if (!data.is_split) fail(ErrorKind::contract, "training needs a split dataset");
    if (data.train.empty()) fail(ErrorKind::contract, "training split is empty");
    if (data.n_students != model.config.n_students || data.n_exercises != model.config.n_exercises ||
        data.n_concepts != model.config.n_concepts) {
        fail(ErrorKind::integrity, "dataset dimensions do not match the model");
    }

    std::vector<Tensor> params;
    for (const auto& p : model.parameters()) params.push_back(p.tensor);
    AdamState state = make_adam_state(params);
    TrainHistory history;
    const auto n = static_cast<Index>(data.train.size());

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        model.temperature = config.temperature_at(epoch);
        const std::uint64_t epoch_seed = mix_seed(config.seed, static_cast<std::uint64_t>(epoch));
        const auto batches = make_batches(n, config.batch_size, mix_seed(epoch_seed, 0));
        double loss_total = 0.0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            std::vector<Index> s;
            std::vector<Index> e;
            std::vector<int> r;
            for (Index i : batches[b]) {
                const auto& t = data.train[static_cast<std::size_t>(i)];
                s.push_back(t.student);
                e.push_back(t.exercise);
                r.push_back(t.score);
            }
            ForwardOptions opt;
            opt.mode = Mode::train;
            opt.noise_seed = mix_seed(epoch_seed, config.noise_redraw == NoiseRedraw::per_batch ? b + 1 : 1);
            const Tensor loss = bce_loss(forward(model, s, e, opt).prob, r);
            const double value = loss.item();
            if (!std::isfinite(value)) {
                fail(ErrorKind::numeric, "non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                             std::to_string(b));
            }
            zero_grads(params);
            backward(loss);
            adam_step(params, state, config.adam);
            if (config.project_monotone) project_monotone(model);
            loss_total += value * static_cast<double>(s.size());
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_total / static_cast<double>(n);
        ++model.epochs_trained;
        if (config.evaluate_each_epoch && !data.test.empty()) rec.test = evaluate(model, data.test);
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        history.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return history;
}

}  // namespace kcd
