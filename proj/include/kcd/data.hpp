#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kcd/tensor.hpp"

namespace kcd {

struct ResponseTriplet {
    Index student = 0;
    Index exercise = 0;
    int score = 0;

    bool operator==(const ResponseTriplet&) const = default;
};

struct Provenance {
    std::string source;
    std::optional<std::uint64_t> split_seed;
    int min_logs = 15;
    double train_ratio = 0.7;
};

/// Response logs plus the exercise-concept matrix. Ids are dense and 0-based;
/// student_ids / exercise_ids map them back to the ids found in the files.
struct Dataset {
    Index n_students = 0;
    Index n_exercises = 0;
    Index n_concepts = 0;
    Matrix q;  // n_exercises x n_concepts, entries 0/1
    std::vector<ResponseTriplet> logs;
    std::vector<ResponseTriplet> train;
    std::vector<ResponseTriplet> test;
    bool is_split = false;
    std::vector<std::string> student_ids;
    std::vector<std::string> exercise_ids;
    Provenance provenance;

    /// Exercises the student answered in the training split (or in all logs
    /// when unsplit), in log order.
    std::vector<Index> exercises_of(Index student) const;
};

inline constexpr int default_min_logs = 15;

/// Parses `student_id,exercise_id,score` logs and an `exercise_id,c_0,...`
/// Q-matrix. Duplicate (student, exercise) pairs keep the last score;
/// students with fewer than `min_logs` distinct responses are dropped.
Dataset load_logs(const std::filesystem::path& logs_path, const std::filesystem::path& q_path,
                  int min_logs = default_min_logs);

/// Per-student shuffle and split; each student keeps round-half-up
/// (ratio * n) responses for training.
Dataset split(const Dataset& data, double ratio, std::uint64_t seed);

/// One shuffled pass over n items in blocks of batch_size; the short tail
/// block is kept.
std::vector<std::vector<Index>> make_batches(Index n_items, Index batch_size, std::uint64_t seed);

void write_logs_csv(const std::filesystem::path& path, const Dataset& data,
                    const std::vector<ResponseTriplet>& logs);
void write_q_csv(const std::filesystem::path& path, const Dataset& data);

/// Writes manifest.json, q.csv and either logs.csv or train.csv + test.csv.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Generator for DINA-style responses with known mastery.
struct SynthSpec {
    Index n_students = 300;
    Index n_exercises = 30;
    Index n_concepts = 5;
    double guess_min = 0.05;
    double guess_max = 0.25;
    double slip_min = 0.05;
    double slip_max = 0.25;
    std::vector<double> prevalence;  // per concept; empty means 0.5 everywhere
    double q_density = 0.35;
    double response_rate = 1.0;
    std::uint64_t seed = 7;

    /// Ranges are well-formed. Degenerate values (g = 0, g = 1) are allowed.
    void validate() const;
    /// 0 < g < 0.5 < 1 - sl < 1 for every exercise.
    bool identifiable() const;
};

struct SynthResult {
    Dataset data;  // unsplit
    Matrix mastery;  // n_students x n_concepts, entries 0/1
    std::vector<double> guess;
    std::vector<double> slip;
};

SynthResult synth_dina(const SynthSpec& spec);

}  // namespace kcd
