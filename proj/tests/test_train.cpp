#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "kcd/train.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles_metrics.hpp"

using namespace kcd;
using kcd::testing::pair_count_auc;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::contract;
}

Tensor column(const std::vector<double>& v) {
    Matrix m(static_cast<Index>(v.size()), 1);
    for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Index>(i), 0) = v[i];
    return Tensor::parameter(std::move(m));
}

Dataset small_synthetic(std::uint64_t seed = 7) {
    SynthSpec spec;
    spec.n_students = 60;
    spec.n_exercises = 12;
    spec.n_concepts = 3;
    spec.seed = seed;
    return split(synth_dina(spec).data, 0.7, seed);
}

DiagnosisModel model_for(const Dataset& d, Variant v) {
    ModelConfig c;
    c.variant = v;
    c.n_students = d.n_students;
    c.n_exercises = d.n_exercises;
    c.n_concepts = d.n_concepts;
    c.ncd_hidden = {16, 8};
    c.seed = 1;
    return make_model(c, d.q);
}

}  // namespace

TEST_CASE("bce_loss closed forms") {
    const std::vector<int> labels{1, 0};
    CHECK(bce_loss(column({0.5, 0.5}), labels).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(bce_loss(column({1.0, 0.0}), labels).item() <= 1e-6);
    CHECK(bce_loss(column({1.0, 0.0}), labels).item() >= 0.0);
    CHECK(std::isfinite(bce_loss(column({0.0, 1.0}), labels).item()));
    CHECK(kind_of([&] { bce_loss(column({0.5}), labels); }) == ErrorKind::shape);
}

TEST_CASE("bce_loss matches a scalar loop and its gradient") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.001, 0.999);
    std::vector<double> p(37);
    std::vector<int> y(37);
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = u(rng);
        y[i] = static_cast<int>(rng() % 2);
    }
    double loop = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) loop += -(y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1.0 - p[i]));
    loop /= static_cast<double>(p.size());
    CHECK(std::abs(bce_loss(column(p), y).item() - loop) <= 1e-12);
    CHECK(std::abs(bce_value(p, y) - loop) <= 1e-12);

    const Tensor x = column(p);
    const auto r = kcd::testing::gradcheck([&] { return bce_loss(x, y); }, {x});
    CHECK(r.max_rel_error <= 1e-6);
}

TEST_CASE("auc closed forms") {
    CHECK(auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0);
    CHECK(auc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}) == 0.0);
    CHECK(auc(std::vector<double>(6, 0.3), std::vector<int>{1, 0, 1, 0, 0, 1}) == 0.5);
    CHECK(kind_of([] { auc(std::vector<double>{0.2, 0.4}, std::vector<int>{1, 1}); }) == ErrorKind::metric);
    CHECK(kind_of([] { auc(std::vector<double>{0.2}, std::vector<int>{1, 0}); }) == ErrorKind::shape);
}

TEST_CASE("auc equals pair counting exactly, with ties") {
    std::mt19937_64 rng(5);
    int compared = 0;
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + rng() % 49;
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng() % 7) / 7.0;  // coarse values force ties
            y[i] = static_cast<int>(rng() % 2);
        }
        y[0] = 1;
        y[1] = 0;
        CHECK(auc(s, y) == pair_count_auc(s, y));
        ++compared;
    }
    CHECK(compared == 300);
}

TEST_CASE("auc is invariant under strictly increasing transforms") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> s(40);
    std::vector<int> y(40);
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = n(rng);
        y[i] = static_cast<int>(i % 3 == 0);
    }
    std::vector<double> t(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::exp(3.0 * s[i]) + 1.0;
    CHECK(auc(s, y) == auc(t, y));
}

TEST_CASE("acc") {
    const std::vector<int> y{1, 0, 1, 1};
    CHECK(acc(std::vector<double>{0.9, 0.2, 0.7, 0.5}, y) == 1.0);
    CHECK(acc(std::vector<double>{0.1, 0.8, 0.3, 0.4}, y) == 0.0);
    CHECK(acc(std::vector<double>(4, 0.5), y) == 0.75);
    CHECK(kind_of([] { acc(std::vector<double>{}, std::vector<int>{}); }) == ErrorKind::contract);
}

TEST_CASE("spearman") {
    const std::vector<double> a{1, 2, 3, 4, 5};
    CHECK(spearman(a, std::vector<double>{2, 4, 6, 8, 100}) == doctest::Approx(1.0));
    CHECK(spearman(a, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
    // Ties take average ranks: ranks {1.5,1.5,3} vs {1,2,3}.
    CHECK(spearman(std::vector<double>{0, 0, 1}, std::vector<double>{1, 2, 3}) ==
          doctest::Approx(0.8660254037844386));
    CHECK(kind_of([&] { spearman(a, std::vector<double>(5, 1.0)); }) == ErrorKind::metric);
}

TEST_CASE("adam first step and zero gradient") {
    Tensor p = Tensor::parameter(Matrix::Constant(1, 3, 1.0));
    std::vector<Tensor> params{p};
    AdamState state = make_adam_state(params);
    AdamConfig cfg;
    p.mutable_grad() = (Matrix(1, 3) << 0.5, -2.0, 0.0).finished();
    adam_step(params, state, cfg);
    CHECK(state.step == 1);
    CHECK(p.value()(0, 0) == doctest::Approx(1.0 - cfg.learning_rate * 0.5 / (0.5 + cfg.epsilon)).epsilon(1e-14));
    CHECK(p.value()(0, 1) == doctest::Approx(1.0 + cfg.learning_rate * 2.0 / (2.0 + cfg.epsilon)).epsilon(1e-14));
    CHECK(p.value()(0, 2) == 1.0);

    Tensor q = Tensor::parameter(Matrix::Constant(2, 2, 0.7));
    std::vector<Tensor> qs{q};
    AdamState qstate = make_adam_state(qs);
    q.mutable_grad().setZero();
    adam_step(qs, qstate, cfg);
    CHECK(q.value() == Matrix::Constant(2, 2, 0.7));
}

TEST_CASE("adam matches the hand-iterated recurrence") {
    const double g = 0.3;
    Tensor p = Tensor::parameter(Matrix::Constant(1, 1, 2.0));
    std::vector<Tensor> params{p};
    AdamState state = make_adam_state(params);
    AdamConfig cfg;
    double x = 2.0;
    double m = 0.0;
    double v = 0.0;
    for (int t = 1; t <= 3; ++t) {
        p.mutable_grad()(0, 0) = g;
        adam_step(params, state, cfg);
        m = cfg.beta1 * m + (1 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
        const double mh = m / (1 - std::pow(cfg.beta1, t));
        const double vh = v / (1 - std::pow(cfg.beta2, t));
        x -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon);
        CHECK(std::abs(p.value()(0, 0) - x) <= 1e-12);
    }
}

TEST_CASE("adam rejects mismatched state") {
    Tensor p = Tensor::parameter(Matrix::Zero(2, 2));
    std::vector<Tensor> params{p};
    AdamState state = make_adam_state(params);
    state.m[0] = Matrix::Zero(3, 2);
    CHECK(kind_of([&] { adam_step(params, state, AdamConfig{}); }) == ErrorKind::contract);
    AdamState empty;
    CHECK(kind_of([&] { adam_step(params, empty, AdamConfig{}); }) == ErrorKind::contract);
}

TEST_CASE("adam decreases a convex quadratic after burn-in") {
    Matrix target(1, 4);
    target << 1.0, -2.0, 0.5, 3.0;
    Tensor x = Tensor::parameter(Matrix::Zero(1, 4));
    std::vector<Tensor> params{x};
    AdamState state = make_adam_state(params);
    AdamConfig cfg;
    cfg.learning_rate = 0.01;
    const Tensor t = Tensor::constant(target);
    double previous = std::numeric_limits<double>::infinity();
    for (int step = 0; step < 200; ++step) {
        const Tensor d = x - t;
        const Tensor loss = sum(d * d);
        if (step >= 10) CHECK(loss.item() < previous);
        previous = loss.item();
        zero_grads(params);
        backward(loss);
        adam_step(params, state, cfg);
    }
}

TEST_CASE("train config validation") {
    TrainConfig c;
    c.epochs = 0;
    CHECK(kind_of([&] { c.validate(); }) == ErrorKind::config);
    c = TrainConfig{};
    c.adam.learning_rate = 0.0;
    CHECK(kind_of([&] { c.validate(); }) == ErrorKind::config);
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK(kind_of([&] { c.validate(); }) == ErrorKind::config);

    c = TrainConfig{};
    CHECK(c.temperature_at(0) == 1.0);
    CHECK(c.temperature_at(19) == doctest::Approx(0.3));
    CHECK(c.temperature_at(10) < c.temperature_at(9));
}

TEST_CASE("train reduces the loss and is deterministic") {
    const Dataset d = small_synthetic();
    for (Variant v : {Variant::ka2ncd_e, Variant::dina, Variant::ncd}) {
        CAPTURE(variant_name(v));
        TrainConfig cfg;
        cfg.epochs = 4;
        cfg.batch_size = 32;
        cfg.adam.learning_rate = 0.01;
        cfg.seed = 9;
        DiagnosisModel a = model_for(d, v);
        DiagnosisModel b = model_for(d, v);
        int calls = 0;
        const TrainHistory ha = train(a, d, cfg, [&](const EpochRecord&) { ++calls; });
        const TrainHistory hb = train(b, d, cfg);
        CHECK(calls == 4);
        REQUIRE(ha.epochs.size() == 4);
        CHECK(ha.epochs.back().train_loss < ha.epochs.front().train_loss);
        CHECK(ha.same_results(hb));
        CHECK(a.epochs_trained == 4);
        for (const auto& p : a.parameters()) {
            const auto& q = b.parameters();
            const auto it = std::find_if(q.begin(), q.end(), [&](const auto& x) { return x.name == p.name; });
            REQUIRE(it != q.end());
            CHECK(p.tensor.value() == it->tensor.value());
        }
        if (v == Variant::ncd) {
            for (const auto& l : a.mlps.at("predict").layers) CHECK(l.weight.value().minCoeff() >= 0.0);
        }
    }
}

TEST_CASE("train preconditions and failures") {
    const Dataset d = small_synthetic();
    DiagnosisModel m = model_for(d, Variant::irt);
    Dataset unsplit = d;
    unsplit.is_split = false;
    CHECK(kind_of([&] { train(m, unsplit, TrainConfig{}); }) == ErrorKind::contract);

    Dataset other = small_synthetic();
    other.n_students += 1;
    CHECK(kind_of([&] { train(m, other, TrainConfig{}); }) == ErrorKind::integrity);

    m.fc.at("theta").bias.mutable_value()(0, 0) = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.epochs = 1;
    try {
        train(m, d, cfg);
        FAIL("expected a numeric error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::numeric);
        CHECK(std::string(e.what()).find("batch 0") != std::string::npos);
    }
}

TEST_CASE("history log round trip") {
    TrainHistory h;
    for (int i = 0; i < 3; ++i) {
        EpochRecord r;
        r.epoch = i;
        r.train_loss = 0.1 * i + 1.0 / 3.0;
        r.test.auc = 0.7 + 0.01 * i;
        r.test.acc = 2.0 / 3.0;
        r.test.loss = 0.5;
        r.test.n_evaluated = 42;
        r.wall_seconds = 0.25;
        h.epochs.push_back(r);
    }
    std::stringstream s;
    write_history(s, h);
    const TrainHistory back = read_history(s);
    CHECK(back.same_results(h));
    std::stringstream bad("{\"epoch\": 1}\n");
    CHECK(kind_of([&] { read_history(bad); }) == ErrorKind::parse);
}

TEST_CASE("evaluate reports metrics over every response") {
    const Dataset d = small_synthetic();
    const DiagnosisModel m = model_for(d, Variant::mirt);
    const Metrics r = evaluate(m, d.test);
    CHECK(r.n_evaluated == static_cast<Index>(d.test.size()));
    CHECK(r.auc >= 0.0);
    CHECK(r.auc <= 1.0);
    CHECK(r.loss > 0.0);
    CHECK(kind_of([&] { evaluate(m, std::vector<ResponseTriplet>{}); }) == ErrorKind::contract);
}
