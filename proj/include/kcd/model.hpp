#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kcd/kan.hpp"
#include "kcd/nn.hpp"
#include "kcd/tensor.hpp"

namespace kcd {

enum class Variant {
    irt,
    mirt,
    dina,
    mf,
    ncd,
    ncd_plus,
    kscd,
    kscd_plus,
    rcd,
    rcd_plus,
    kancd,
    kancd_plus,
    ka2ncd_e,
    ka2ncd_kan,
};

inline constexpr std::array<Variant, 14> all_variants{
    Variant::irt,      Variant::mirt,      Variant::dina,       Variant::mf,
    Variant::ncd,      Variant::ncd_plus,  Variant::kscd,       Variant::kscd_plus,
    Variant::rcd,      Variant::rcd_plus,  Variant::kancd,      Variant::kancd_plus,
    Variant::ka2ncd_e, Variant::ka2ncd_kan,
};

/// Canonical names: IRT, MIRT, DINA, MF, NCD, NCDplus, ..., KA2NCDe, KA2NCDkan.
std::string_view variant_name(Variant v);
/// Accepts the canonical names case-insensitively, plus "NCD+" style and
/// "KA2NCD-e" style spellings.
std::optional<Variant> parse_variant(std::string_view name);
/// Comma-separated canonical names, for error messages.
std::string variant_list();

bool is_two_level(Variant v);
bool has_kan(Variant v);

/// Architecture settings. The embedding width equals the concept count.
struct ModelConfig {
    Variant variant = Variant::ncd;
    Index n_students = 0;
    Index n_exercises = 0;
    Index n_concepts = 0;
    int k_heads = 2;
    SplineGrid grid;
    std::vector<Index> ncd_hidden{256, 128};
    std::uint64_t seed = 0;

    void validate() const;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// A model variant with its parameter bank. Sub-networks are keyed by role;
/// embedding tables by "student", "exercise", "concept" (suffixed ".i" per
/// head in the two-level models).
struct DiagnosisModel {
    ModelConfig config;
    Matrix q;  // n_exercises x n_concepts
    std::map<std::string, Tensor> tables;
    std::map<std::string, Linear> fc;
    std::map<std::string, Mlp> mlps;
    std::map<std::string, KanNetwork> kans;
    double temperature = 1.0;  // Gumbel temperature, DINA only
    int epochs_trained = 0;

    Variant variant() const { return config.variant; }
    Index dim() const { return config.n_concepts; }

    /// Every trainable tensor with a stable dotted name, in name order.
    std::vector<NamedTensor> parameters() const;
    std::vector<std::string> kan_names() const;
};

DiagnosisModel make_model(const ModelConfig& config, const Matrix& q);
DiagnosisModel clone_model(const DiagnosisModel& model);

enum class Mode { train, eval };

struct ForwardOptions {
    Mode mode = Mode::eval;
    /// Seeds DINA's Gumbel noise in training mode.
    std::uint64_t noise_seed = 0;
    bool record_trace = false;
};

/// Named intermediates of one batched forward, each with one row per example.
/// Keys include theta, beta, a, alpha, f_s, f_diff, f_disc, y, h_s_hat,
/// h_e_hat, g, sl, nt, v, ls, and "input:<kan>" for the input each KAN saw.
using ForwardTrace = std::map<std::string, Matrix>;

struct ForwardResult {
    Tensor prob;  // B x 1
    ForwardTrace trace;
};

ForwardResult forward(const DiagnosisModel& model, std::span<const Index> students,
                      std::span<const Index> exercises, const ForwardOptions& options = {});

/// Evaluation-mode probabilities without recording a graph.
Vector predict(const DiagnosisModel& model, std::span<const Index> students,
               std::span<const Index> exercises);

/// Clamps the weights of every monotone FC layer at zero from below.
void project_monotone(DiagnosisModel& model);

struct MasteryVector {
    Index student = 0;
    Vector values;  // n_concepts, each in [0, 1]
    std::string source;
    bool untrained = false;
};

/// `exercises` are the student's training exercises; only the two-level
/// models use them (the readout is averaged over them, or over every
/// exercise when empty).
MasteryVector mastery(const DiagnosisModel& model, Index student, std::span<const Index> exercises);

}  // namespace kcd
