#include "kcd/model.hpp"

#include <algorithm>
#include <cctype>
#include <random>

namespace kcd {

namespace {

struct VariantInfo {
    Variant variant;
    std::string_view name;
};

constexpr std::array<VariantInfo, 14> variant_table{{
    {Variant::irt, "IRT"},
    {Variant::mirt, "MIRT"},
    {Variant::dina, "DINA"},
    {Variant::mf, "MF"},
    {Variant::ncd, "NCD"},
    {Variant::ncd_plus, "NCDplus"},
    {Variant::kscd, "KSCD"},
    {Variant::kscd_plus, "KSCDplus"},
    {Variant::rcd, "RCD"},
    {Variant::rcd_plus, "RCDplus"},
    {Variant::kancd, "KaNCD"},
    {Variant::kancd_plus, "KaNCDplus"},
    {Variant::ka2ncd_e, "KA2NCDe"},
    {Variant::ka2ncd_kan, "KA2NCDkan"},
}};

std::string fold(std::string_view s) {
    std::string out;
    for (char c : s) {
        if (c == '-' || c == '_') continue;
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    const auto plus = out.find('+');
    if (plus != std::string::npos) out.replace(plus, 1, "plus");
    return out;
}

std::string index_suffix(std::size_t i) { return "." + std::to_string(i); }

KanNetwork single_kan(Index n_in, Index n_out, const SplineGrid& grid, std::mt19937_64& rng) {
    const std::array<Index, 2> widths{n_in, n_out};
    return make_kan_network(widths, grid, Renormalization::none, rng);
}

Matrix q_rows(const DiagnosisModel& model, std::span<const Index> exercises) {
    Matrix out(static_cast<Index>(exercises.size()), model.q.cols());
    for (std::size_t b = 0; b < exercises.size(); ++b) {
        const Index e = exercises[b];
        if (e < 0 || e >= model.q.rows()) {
            fail(ErrorKind::lookup, "exercise " + std::to_string(e) + " outside [0, " +
                                        std::to_string(model.q.rows()) + ")");
        }
        out.row(static_cast<Index>(b)) = model.q.row(e);
    }
    return out;
}

void check_ids(std::span<const Index> ids, Index bound, const char* what) {
    for (Index id : ids) {
        if (id < 0 || id >= bound) {
            fail(ErrorKind::lookup, std::string(what) + " " + std::to_string(id) + " outside [0, " +
                                        std::to_string(bound) + ")");
        }
    }
}

Matrix onehot(std::span<const Index> hot, Index width) {
    Matrix m = Matrix::Zero(static_cast<Index>(hot.size()), width);
    for (std::size_t b = 0; b < hot.size(); ++b) m(static_cast<Index>(b), hot[b]) = 1.0;
    return m;
}

// Builds one forward pass; holds the batch and the optional trace.
class Pass {
public:
    Pass(const DiagnosisModel& model, std::span<const Index> students, std::span<const Index> exercises,
         const ForwardOptions& options)
        : m_(model), students_(students), exercises_(exercises), opt_(options) {}

    Tensor run() {
        if (students_.size() != exercises_.size()) {
            fail(ErrorKind::shape, "batch has " + std::to_string(students_.size()) + " students but " +
                                       std::to_string(exercises_.size()) + " exercises");
        }
        check_ids(students_, m_.config.n_students, "student");
        check_ids(exercises_, m_.config.n_exercises, "exercise");
        switch (m_.variant()) {
            case Variant::irt: return irt();
            case Variant::mirt: return mirt();
            case Variant::dina: return dina();
            case Variant::mf: return mf();
            case Variant::ncd:
            case Variant::ncd_plus:
            case Variant::kancd:
            case Variant::kancd_plus: return ncd_family();
            case Variant::kscd:
            case Variant::kscd_plus: return kscd();
            case Variant::rcd:
            case Variant::rcd_plus: return rcd();
            case Variant::ka2ncd_e:
            case Variant::ka2ncd_kan: return two_level();
        }
        fail(ErrorKind::contract, "unhandled variant");
    }

    ForwardTrace take_trace() { return std::move(trace_); }

    // h_S, h_E, h_C of the single-bank models; the concept table is the
    // identity, so h_C is the Q row itself.
    Tensor h_s() { return gather_rows(m_.tables.at("student"), students_); }
    Tensor h_e() { return gather_rows(m_.tables.at("exercise"), exercises_); }
    Tensor h_c() { return Tensor::constant(q_rows(m_, exercises_)); }

    // Ability readout of the neural models for a given h_C (mastery probes).
    Tensor student_readout(const Tensor& hs, const Tensor& hc) {
        switch (m_.variant()) {
            case Variant::kscd:
            case Variant::kscd_plus:
            case Variant::rcd:
            case Variant::rcd_plus: return sigmoid(head("student", concat_cols(hs, hc)));
            default: fail(ErrorKind::contract, "no concept-conditioned readout for this variant");
        }
    }

private:
    void record(const std::string& key, const Tensor& t) {
        if (opt_.record_trace) trace_[key] = t.value();
    }

    // A role-named head, whichever of FC / MLP / KAN the variant uses for it.
    Tensor head(const std::string& role, const Tensor& x) {
        if (auto it = m_.kans.find(role); it != m_.kans.end()) {
            record("input:" + role, x);
            return kan_forward(it->second, x);
        }
        if (auto it = m_.mlps.find(role); it != m_.mlps.end()) return mlp_forward(it->second, x);
        return linear_forward(m_.fc.at(role), x);
    }

    Tensor irt() {
        const Tensor hs = h_s();
        const Tensor he = h_e();
        const Tensor theta = head("theta", hs);
        const Tensor beta = head("beta", he);
        const Tensor a = softplus(head("disc", he));
        record("theta", theta);
        record("beta", beta);
        record("a", a);
        return sigmoid(a * (theta - beta));
    }

    Tensor mirt() {
        const Tensor theta = h_s();
        const Tensor beta = head("beta", h_e());
        const Tensor alpha = head("alpha", h_c());
        record("theta", theta);
        record("beta", beta);
        record("alpha", alpha);
        return sigmoid(row_sum(alpha * theta) - beta);
    }

    Tensor dina() {
        const Tensor logits = head("mastery", h_s());
        Tensor theta;
        if (opt_.mode == Mode::train) {
            // Binary Gumbel-softmax: logistic noise on the logit.
            std::mt19937_64 rng(opt_.noise_seed);
            std::uniform_real_distribution<double> unit(1e-12, 1.0 - 1e-12);
            Matrix noise(logits.rows(), logits.cols());
            for (Index i = 0; i < noise.size(); ++i) {
                const double u = unit(rng);
                noise.data()[i] = std::log(u) - std::log1p(-u);
            }
            theta = sigmoid((logits + Tensor::constant(std::move(noise))) * (1.0 / m_.temperature));
        } else {
            theta = Tensor::constant(logits.value().unaryExpr([](double l) { return l > 0.0 ? 1.0 : 0.0; }));
        }
        const Tensor beta = h_c();
        // nt = prod_k theta_k^beta_k with binary beta
        const Tensor nt = row_prod(beta * theta + (1.0 - beta));
        const Tensor he = h_e();
        const Tensor guess_logit = head("guess", he);
        const Tensor slip_logit = head("slip", he);
        const Tensor log_guess = -softplus(-guess_logit);
        const Tensor log_no_slip = -softplus(slip_logit);
        record("theta", theta);
        record("nt", nt);
        record("g", sigmoid(guess_logit));
        record("sl", sigmoid(slip_logit));
        return exp((1.0 - nt) * log_guess + nt * log_no_slip);
    }

    Tensor mf() { return sigmoid(row_sum(h_s() * h_e())); }

    Tensor ncd_family() {
        const bool kancd = m_.variant() == Variant::kancd || m_.variant() == Variant::kancd_plus;
        const Tensor hs = h_s();
        const Tensor he = h_e();
        const Tensor hc = h_c();
        const Tensor f_s = sigmoid(kancd ? head("ability", hs) : hs);
        const Tensor f_diff = sigmoid(kancd ? head("difficulty", he) : he);
        const Tensor f_disc = sigmoid(head("disc", he));
        const Tensor y = scale_rows(hc * (f_s - f_diff), f_disc);
        record("f_s", f_s);
        record("f_diff", f_diff);
        record("f_disc", f_disc);
        record("y", y);
        return sigmoid(head("predict", y));
    }

    std::pair<Tensor, Tensor> conditioned(const Tensor& hc) {
        const Tensor s_hat = sigmoid(head("student", concat_cols(h_s(), hc)));
        const Tensor e_hat = sigmoid(head("exercise", concat_cols(h_e(), hc)));
        record("h_s_hat", s_hat);
        record("h_e_hat", e_hat);
        return {s_hat, e_hat};
    }

    Tensor kscd() {
        const Tensor hc = h_c();
        const auto [s_hat, e_hat] = conditioned(hc);
        const double inv_d = 1.0 / static_cast<double>(m_.dim());
        return clamp(row_sum(hc * (s_hat - e_hat)) * inv_d + 0.5, 0.0, 1.0);
    }

    Tensor rcd() {
        const auto [s_hat, e_hat] = conditioned(h_c());
        return sigmoid(row_mean(head("predict", s_hat - e_hat)));
    }

    Tensor two_level() {
        const int k = m_.config.k_heads;
        const Matrix q = q_rows(m_, exercises_);
        std::vector<Tensor> v;
        for (int i = 0; i < k; ++i) {
            const std::string sfx = index_suffix(static_cast<std::size_t>(i));
            std::array<Tensor, 3> h;
            if (m_.variant() == Variant::ka2ncd_e) {
                h[0] = gather_rows(m_.tables.at("student" + sfx), students_);
                h[1] = gather_rows(m_.tables.at("exercise" + sfx), exercises_);
                h[2] = matmul(Tensor::constant(q), m_.tables.at("concept" + sfx));
            } else {
                h[0] = embed_onehot("embed.student" + sfx, students_, m_.config.n_students);
                h[1] = embed_onehot("embed.exercise" + sfx, exercises_, m_.config.n_exercises);
                h[2] = head("embed.concept" + sfx, Tensor::constant(q));
            }
            for (int t = 0; t < 3; ++t) {
                v.push_back(head("low" + index_suffix(static_cast<std::size_t>(3 * i + t)), h[t]));
            }
        }
        const Tensor v_all = concat_cols(v);
        const KanNetwork& up = m_.kans.at("up");
        record("input:up", v_all);
        const Tensor ls = kan_layer_forward(up.layers[0], v_all);
        const SplineGrid& g = up.layers[1].grid;
        const Tensor out = kan_layer_forward(up.layers[1], sigmoid(ls) * (g.hi - g.lo) + g.lo);
        record("v", v_all);
        record("ls", ls);
        return sigmoid(out);
    }

    Tensor embed_onehot(const std::string& role, std::span<const Index> hot, Index width) {
        const KanNetwork& net = m_.kans.at(role);
        if (opt_.record_trace) trace_["input:" + role] = onehot(hot, width);
        return kan_layer_forward_onehot(net.layers[0], hot);
    }

    const DiagnosisModel& m_;
    std::span<const Index> students_;
    std::span<const Index> exercises_;
    ForwardOptions opt_;
    ForwardTrace trace_;
};

}  // namespace

std::string_view variant_name(Variant v) {
    for (const auto& info : variant_table) {
        if (info.variant == v) return info.name;
    }
    return "?";
}

std::optional<Variant> parse_variant(std::string_view name) {
    const std::string key = fold(name);
    for (const auto& info : variant_table) {
        if (fold(info.name) == key) return info.variant;
    }
    return std::nullopt;
}

std::string variant_list() {
    std::string out;
    for (const auto& info : variant_table) {
        if (!out.empty()) out += ", ";
        out += info.name;
    }
    return out;
}

bool is_two_level(Variant v) { return v == Variant::ka2ncd_e || v == Variant::ka2ncd_kan; }

bool has_kan(Variant v) {
    switch (v) {
        case Variant::ncd_plus:
        case Variant::kscd_plus:
        case Variant::rcd_plus:
        case Variant::kancd_plus:
        case Variant::ka2ncd_e:
        case Variant::ka2ncd_kan: return true;
        default: return false;
    }
}

void ModelConfig::validate() const {
    if (n_students < 1 || n_exercises < 1 || n_concepts < 1) {
        fail(ErrorKind::config, "model needs at least one student, exercise and concept");
    }
    if (k_heads < 1) fail(ErrorKind::config, "k_heads must be at least 1");
    grid.validate();
    for (Index w : ncd_hidden) {
        if (w < 1) fail(ErrorKind::config, "hidden widths must be positive");
    }
}

std::vector<NamedTensor> DiagnosisModel::parameters() const {
    std::vector<NamedTensor> out;
    for (const auto& [name, t] : tables) {
        if (t.requires_grad()) out.push_back({"table." + name, t});
    }
    for (const auto& [name, l] : fc) {
        out.push_back({"fc." + name + ".weight", l.weight});
        out.push_back({"fc." + name + ".bias", l.bias});
    }
    for (const auto& [name, mlp] : mlps) {
        for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
            out.push_back({"mlp." + name + index_suffix(i) + ".weight", mlp.layers[i].weight});
            out.push_back({"mlp." + name + index_suffix(i) + ".bias", mlp.layers[i].bias});
        }
    }
    for (const auto& [name, net] : kans) {
        for (std::size_t i = 0; i < net.layers.size(); ++i) {
            out.push_back({"kan." + name + index_suffix(i) + ".coeffs", net.layers[i].spline_coeffs});
            out.push_back({"kan." + name + index_suffix(i) + ".base", net.layers[i].base_weight});
        }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return out;
}

std::vector<std::string> DiagnosisModel::kan_names() const {
    std::vector<std::string> out;
    for (const auto& [name, net] : kans) out.push_back(name);
    return out;
}

DiagnosisModel make_model(const ModelConfig& config, const Matrix& q) {
    config.validate();
    if (q.rows() != config.n_exercises || q.cols() != config.n_concepts) {
        fail(ErrorKind::shape, "Q-matrix is " + std::to_string(q.rows()) + "x" + std::to_string(q.cols()) +
                                   ", model expects " + std::to_string(config.n_exercises) + "x" +
                                   std::to_string(config.n_concepts));
    }
    for (Index j = 0; j < q.rows(); ++j) {
        if (q.row(j).sum() <= 0.0) {
            fail(ErrorKind::integrity, "exercise " + std::to_string(j) + " has an empty Q row");
        }
    }

    DiagnosisModel m;
    m.config = config;
    m.q = q;
    std::mt19937_64 rng(config.seed);
    const Index N = config.n_students;
    const Index M = config.n_exercises;
    const Index K = config.n_concepts;
    const Index D = K;
    const SplineGrid& grid = config.grid;

    auto single_bank = [&] {
        m.tables["student"] = Tensor::parameter(xavier_normal(N, D, rng));
        m.tables["exercise"] = Tensor::parameter(xavier_normal(M, D, rng));
    };
    auto predict_mlp = [&](Index n_in) {
        std::vector<Index> widths{n_in};
        widths.insert(widths.end(), config.ncd_hidden.begin(), config.ncd_hidden.end());
        widths.push_back(1);
        return make_mlp(widths, rng, true);
    };

    switch (config.variant) {
        case Variant::irt:
            single_bank();
            m.fc["theta"] = make_linear(D, 1, rng);
            m.fc["beta"] = make_linear(D, 1, rng);
            m.fc["disc"] = make_linear(D, 1, rng);
            break;
        case Variant::mirt:
            single_bank();
            m.fc["beta"] = make_linear(D, 1, rng);
            m.fc["alpha"] = make_linear(D, D, rng);
            break;
        case Variant::dina:
            single_bank();
            m.fc["mastery"] = make_linear(D, K, rng);
            m.fc["guess"] = make_linear(D, 1, rng);
            m.fc["slip"] = make_linear(D, 1, rng);
            break;
        case Variant::mf: single_bank(); break;
        case Variant::ncd:
            single_bank();
            m.fc["disc"] = make_linear(D, 1, rng);
            m.mlps["predict"] = predict_mlp(D);
            break;
        case Variant::ncd_plus:
            single_bank();
            m.kans["disc"] = single_kan(D, 1, grid, rng);
            m.kans["predict"] = single_kan(D, 1, grid, rng);
            break;
        case Variant::kscd:
        case Variant::rcd:
            single_bank();
            m.fc["student"] = make_linear(2 * D, D, rng);
            m.fc["exercise"] = make_linear(2 * D, D, rng);
            if (config.variant == Variant::rcd) m.fc["predict"] = make_linear(D, D, rng, true);
            break;
        case Variant::kscd_plus:
        case Variant::rcd_plus:
            single_bank();
            m.kans["student"] = single_kan(2 * D, D, grid, rng);
            m.kans["exercise"] = single_kan(2 * D, D, grid, rng);
            if (config.variant == Variant::rcd_plus) m.kans["predict"] = single_kan(D, D, grid, rng);
            break;
        case Variant::kancd:
            single_bank();
            m.fc["ability"] = make_linear(D, D, rng);
            m.fc["difficulty"] = make_linear(D, D, rng);
            m.fc["disc"] = make_linear(D, 1, rng);
            m.mlps["predict"] = predict_mlp(D);
            break;
        case Variant::kancd_plus:
            single_bank();
            m.kans["ability"] = single_kan(D, D, grid, rng);
            m.kans["difficulty"] = single_kan(D, D, grid, rng);
            m.kans["disc"] = single_kan(D, 1, grid, rng);
            m.kans["predict"] = single_kan(D, 1, grid, rng);
            break;
        case Variant::ka2ncd_e:
        case Variant::ka2ncd_kan: {
            const int k = config.k_heads;
            for (int i = 0; i < k; ++i) {
                const std::string sfx = index_suffix(static_cast<std::size_t>(i));
                if (config.variant == Variant::ka2ncd_e) {
                    m.tables["student" + sfx] = Tensor::parameter(xavier_normal(N, D, rng));
                    m.tables["exercise" + sfx] = Tensor::parameter(xavier_normal(M, D, rng));
                    m.tables["concept" + sfx] = Tensor::parameter(xavier_normal(K, D, rng));
                } else {
                    m.kans["embed.student" + sfx] = single_kan(N, D, grid, rng);
                    m.kans["embed.exercise" + sfx] = single_kan(M, D, grid, rng);
                    m.kans["embed.concept" + sfx] = single_kan(K, D, grid, rng);
                }
            }
            for (int j = 0; j < 3 * k; ++j) {
                m.kans["low" + index_suffix(static_cast<std::size_t>(j))] = single_kan(D, 1, grid, rng);
            }
            const std::array<Index, 3> up{3 * static_cast<Index>(k), K, 1};
            m.kans["up"] = make_kan_network(up, grid, Renormalization::affine_to_grid, rng);
            break;
        }
    }
    return m;
}

DiagnosisModel clone_model(const DiagnosisModel& model) {
    DiagnosisModel copy = model;
    for (auto& [name, t] : copy.tables) t = t.clone();
    for (auto& [name, l] : copy.fc) l = l.clone();
    for (auto& [name, mlp] : copy.mlps) mlp = mlp.clone();
    for (auto& [name, net] : copy.kans) net = net.clone();
    return copy;
}

ForwardResult forward(const DiagnosisModel& model, std::span<const Index> students,
                      std::span<const Index> exercises, const ForwardOptions& options) {
    if (model.variant() == Variant::dina && options.mode == Mode::train && !(model.temperature > 0.0)) {
        fail(ErrorKind::config, "Gumbel temperature must be positive");
    }
    Pass pass(model, students, exercises, options);
    ForwardResult result;
    result.prob = pass.run();
    result.trace = pass.take_trace();
    return result;
}

Vector predict(const DiagnosisModel& model, std::span<const Index> students, std::span<const Index> exercises) {
    NoGradGuard guard;
    const Matrix p = forward(model, students, exercises).prob.value();
    return Eigen::Map<const Vector>(p.data(), p.rows());
}

void project_monotone(DiagnosisModel& model) {
    for (auto& [name, l] : model.fc) {
        if (l.monotone) project_nonnegative(l);
    }
    for (auto& [name, mlp] : model.mlps) {
        for (auto& l : mlp.layers) {
            if (l.monotone) project_nonnegative(l);
        }
    }
}

MasteryVector mastery(const DiagnosisModel& model, Index student, std::span<const Index> exercises) {
    NoGradGuard guard;
    check_ids(std::span<const Index>(&student, 1), model.config.n_students, "student");
    const Index K = model.config.n_concepts;
    MasteryVector out;
    out.student = student;
    out.untrained = model.epochs_trained == 0;
    const std::array<Index, 1> one{student};
    const std::array<Index, 1> ex0{0};
    ForwardOptions traced;
    traced.record_trace = true;

    switch (model.variant()) {
        case Variant::irt: {
            const auto trace = forward(model, one, ex0, traced).trace;
            out.values = Vector::Constant(K, 1.0 / (1.0 + std::exp(-trace.at("theta")(0, 0))));
            out.source = "sigmoid(theta)";
            break;
        }
        case Variant::mirt:
        case Variant::mf: {
            const Matrix hs = gather_rows(model.tables.at("student"), one).value();
            out.values = hs.row(0).transpose().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
            out.source = model.variant() == Variant::mirt ? "sigmoid(theta)" : "sigmoid(h_s)";
            break;
        }
        case Variant::dina: {
            const Tensor hs = gather_rows(model.tables.at("student"), one);
            const Matrix p = sigmoid(linear_forward(model.fc.at("mastery"), hs)).value();
            out.values = p.row(0).transpose();
            out.source = "theta";
            break;
        }
        case Variant::ncd:
        case Variant::ncd_plus:
        case Variant::kancd:
        case Variant::kancd_plus: {
            const auto trace = forward(model, one, ex0, traced).trace;
            out.values = trace.at("f_s").row(0).transpose();
            out.source = "f_s";
            break;
        }
        case Variant::kscd:
        case Variant::kscd_plus:
        case Variant::rcd:
        case Variant::rcd_plus: {
            // ĥ_S with h_C set to each unit concept row, averaged.
            std::vector<Index> repeated(static_cast<std::size_t>(K), student);
            std::vector<Index> ex(static_cast<std::size_t>(K), 0);
            Pass pass(model, repeated, ex, {});
            const Tensor hs = pass.h_s();
            const Matrix s_hat = pass.student_readout(hs, Tensor::constant(Matrix::Identity(K, K))).value();
            out.values = s_hat.colwise().mean().transpose();
            out.source = "h_s_hat";
            break;
        }
        case Variant::ka2ncd_e:
        case Variant::ka2ncd_kan: {
            std::vector<Index> ex(exercises.begin(), exercises.end());
            if (ex.empty()) {
                for (Index j = 0; j < model.config.n_exercises; ++j) ex.push_back(j);
            }
            std::vector<Index> repeated(ex.size(), student);
            const auto trace = forward(model, repeated, ex, traced).trace;
            const Matrix p = trace.at("ls").unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
            out.values = p.colwise().mean().transpose();
            out.source = "sigmoid(ls)";
            break;
        }
    }
    out.values = out.values.cwiseMax(0.0).cwiseMin(1.0);
    return out;
}

}  // namespace kcd
