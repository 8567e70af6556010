#include "kcd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace kcd {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(trim(field));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::ifstream open_input(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    return in;
}

std::ofstream open_output(const fs::path& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::io, "cannot write " + path.string());
    return out;
}

[[noreturn]] void parse_error(const fs::path& path, std::size_t line, const std::string& what) {
    fail(ErrorKind::parse, path.string() + ":" + std::to_string(line) + ": " + what);
}

struct QFile {
    Matrix q;
    std::vector<std::string> ids;
};

QFile read_q(const fs::path& path) {
    auto in = open_input(path);
    std::string line;
    std::size_t line_no = 0;
    QFile result;
    std::vector<std::vector<double>> rows;
    Index k = -1;
    std::unordered_map<std::string, std::size_t> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto fields = split_fields(line);
        if (k < 0) {
            if (fields.size() < 2 || fields[0] != "exercise_id") {
                parse_error(path, line_no, "expected header 'exercise_id,c_0,...'");
            }
            k = static_cast<Index>(fields.size()) - 1;
            continue;
        }
        if (static_cast<Index>(fields.size()) != k + 1) {
            parse_error(path, line_no, "expected " + std::to_string(k + 1) + " fields, got " +
                                           std::to_string(fields.size()));
        }
        if (fields[0].empty()) parse_error(path, line_no, "empty exercise id");
        if (!seen.emplace(fields[0], rows.size()).second) {
            fail(ErrorKind::integrity, path.string() + ":" + std::to_string(line_no) +
                                           ": duplicate exercise '" + fields[0] + "'");
        }
        std::vector<double> row;
        bool any = false;
        for (Index c = 1; c <= k; ++c) {
            const auto& f = fields[static_cast<std::size_t>(c)];
            if (f != "0" && f != "1") parse_error(path, line_no, "Q entry must be 0 or 1, got '" + f + "'");
            row.push_back(f == "1" ? 1.0 : 0.0);
            any = any || f == "1";
        }
        if (!any) {
            fail(ErrorKind::integrity, path.string() + ":" + std::to_string(line_no) + ": exercise '" +
                                           fields[0] + "' has an empty Q row");
        }
        result.ids.push_back(fields[0]);
        rows.push_back(std::move(row));
    }
    if (k < 0) parse_error(path, line_no, "missing header");
    result.q = Matrix(static_cast<Index>(rows.size()), k);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (Index c = 0; c < k; ++c) result.q(static_cast<Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
    }
    return result;
}

struct RawLog {
    std::string student;
    std::string exercise;
    int score;
};

std::vector<RawLog> read_raw_logs(const fs::path& path) {
    auto in = open_input(path);
    std::string line;
    std::size_t line_no = 0;
    bool header = false;
    std::vector<RawLog> logs;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto fields = split_fields(line);
        if (!header) {
            if (fields != std::vector<std::string>{"student_id", "exercise_id", "score"}) {
                parse_error(path, line_no, "expected header 'student_id,exercise_id,score'");
            }
            header = true;
            continue;
        }
        if (fields.size() != 3) {
            parse_error(path, line_no, "expected 3 fields, got " + std::to_string(fields.size()));
        }
        if (fields[0].empty() || fields[1].empty()) parse_error(path, line_no, "empty id");
        if (fields[2] != "0" && fields[2] != "1") {
            parse_error(path, line_no, "score must be 0 or 1, got '" + fields[2] + "'");
        }
        logs.push_back({fields[0], fields[1], fields[2] == "1" ? 1 : 0});
    }
    if (!header) parse_error(path, line_no, "missing header");
    return logs;
}

Index lookup_id(const std::unordered_map<std::string, Index>& ids, const std::string& id,
                const fs::path& path, const char* what) {
    auto it = ids.find(id);
    if (it == ids.end()) fail(ErrorKind::integrity, path.string() + ": unknown " + what + " '" + id + "'");
    return it->second;
}

std::vector<ResponseTriplet> read_dense_logs(const fs::path& path,
                                             const std::unordered_map<std::string, Index>& students,
                                             const std::unordered_map<std::string, Index>& exercises) {
    std::vector<ResponseTriplet> out;
    for (const auto& raw : read_raw_logs(path)) {
        out.push_back({lookup_id(students, raw.student, path, "student"),
                       lookup_id(exercises, raw.exercise, path, "exercise"), raw.score});
    }
    return out;
}

}  // namespace

std::vector<Index> Dataset::exercises_of(Index student) const {
    std::vector<Index> out;
    for (const auto& t : is_split ? train : logs) {
        if (t.student == student) out.push_back(t.exercise);
    }
    return out;
}

Dataset load_logs(const fs::path& logs_path, const fs::path& q_path, int min_logs) {
    if (!fs::exists(q_path)) fail(ErrorKind::io, "Q-matrix file not found: " + q_path.string());
    if (!fs::exists(logs_path)) fail(ErrorKind::io, "log file not found: " + logs_path.string());
    QFile qfile = read_q(q_path);
    std::unordered_map<std::string, Index> exercise_index;
    for (std::size_t j = 0; j < qfile.ids.size(); ++j) exercise_index[qfile.ids[j]] = static_cast<Index>(j);

    const auto raw = read_raw_logs(logs_path);

    // Last write wins for duplicates; students keep first-appearance order.
    std::vector<std::string> student_order;
    std::unordered_map<std::string, std::vector<std::pair<Index, int>>> per_student;
    std::map<std::pair<std::string, Index>, std::size_t> slot;
    for (const auto& r : raw) {
        const Index e = lookup_id(exercise_index, r.exercise, logs_path, "exercise (not in Q-matrix)");
        auto [it, fresh] = per_student.try_emplace(r.student);
        if (fresh) student_order.push_back(r.student);
        auto [pos, inserted] = slot.try_emplace({r.student, e}, it->second.size());
        if (inserted) {
            it->second.emplace_back(e, r.score);
        } else {
            it->second[pos->second].second = r.score;
        }
    }

    Dataset data;
    data.n_exercises = qfile.q.rows();
    data.n_concepts = qfile.q.cols();
    data.q = std::move(qfile.q);
    data.exercise_ids = std::move(qfile.ids);
    for (const auto& sid : student_order) {
        const auto& responses = per_student[sid];
        if (static_cast<int>(responses.size()) < min_logs) continue;
        const Index s = static_cast<Index>(data.student_ids.size());
        data.student_ids.push_back(sid);
        for (const auto& [e, score] : responses) data.logs.push_back({s, e, score});
    }
    data.n_students = static_cast<Index>(data.student_ids.size());
    data.provenance.source = logs_path.string();
    data.provenance.min_logs = min_logs;
    return data;
}

Dataset split(const Dataset& data, double ratio, std::uint64_t seed) {
    if (data.is_split) fail(ErrorKind::contract, "dataset is already split");
    if (!(ratio > 0.0 && ratio < 1.0)) fail(ErrorKind::config, "split ratio must lie in (0, 1)");
    Dataset out = data;
    out.train.clear();
    out.test.clear();
    std::vector<std::vector<ResponseTriplet>> by_student(static_cast<std::size_t>(data.n_students));
    for (const auto& t : data.logs) by_student[static_cast<std::size_t>(t.student)].push_back(t);
    std::mt19937_64 rng(seed);
    for (auto& logs : by_student) {
        std::shuffle(logs.begin(), logs.end(), rng);
        // Round half up; the epsilon absorbs products like 0.7 * 15 landing
        // just under the half.
        const auto n_train = static_cast<std::size_t>(
            std::floor(ratio * static_cast<double>(logs.size()) + 0.5 + 1e-9));
        for (std::size_t i = 0; i < logs.size(); ++i) (i < n_train ? out.train : out.test).push_back(logs[i]);
    }
    out.is_split = true;
    out.provenance.split_seed = seed;
    out.provenance.train_ratio = ratio;
    return out;
}

std::vector<std::vector<Index>> make_batches(Index n_items, Index batch_size, std::uint64_t seed) {
    if (batch_size < 1) fail(ErrorKind::contract, "batch size must be at least 1");
    std::vector<Index> order(static_cast<std::size_t>(n_items));
    for (Index i = 0; i < n_items; ++i) order[static_cast<std::size_t>(i)] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<Index>> out;
    for (Index at = 0; at < n_items; at += batch_size) {
        const Index end = std::min(n_items, at + batch_size);
        out.emplace_back(order.begin() + at, order.begin() + end);
    }
    return out;
}

void write_logs_csv(const fs::path& path, const Dataset& data, const std::vector<ResponseTriplet>& logs) {
    auto out = open_output(path);
    out << "student_id,exercise_id,score\n";
    for (const auto& t : logs) {
        out << data.student_ids[static_cast<std::size_t>(t.student)] << ','
            << data.exercise_ids[static_cast<std::size_t>(t.exercise)] << ',' << t.score << '\n';
    }
}

void write_q_csv(const fs::path& path, const Dataset& data) {
    auto out = open_output(path);
    out << "exercise_id";
    for (Index c = 0; c < data.n_concepts; ++c) out << ",c_" << c;
    out << '\n';
    for (Index j = 0; j < data.n_exercises; ++j) {
        out << data.exercise_ids[static_cast<std::size_t>(j)];
        for (Index c = 0; c < data.n_concepts; ++c) out << ',' << (data.q(j, c) != 0.0 ? 1 : 0);
        out << '\n';
    }
}

void save_dataset(const Dataset& data, const fs::path& dir) {
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "kcd-dataset";
    manifest["version"] = 1;
    manifest["n_students"] = data.n_students;
    manifest["n_exercises"] = data.n_exercises;
    manifest["n_concepts"] = data.n_concepts;
    manifest["min_logs"] = data.provenance.min_logs;
    manifest["train_ratio"] = data.provenance.train_ratio;
    manifest["source"] = data.provenance.source;
    manifest["is_split"] = data.is_split;
    manifest["split_seed"] = data.provenance.split_seed ? nlohmann::json(*data.provenance.split_seed)
                                                        : nlohmann::json(nullptr);
    manifest["student_ids"] = data.student_ids;
    manifest["exercise_ids"] = data.exercise_ids;
    open_output(dir / "manifest.json") << manifest.dump(2) << '\n';
    write_q_csv(dir / "q.csv", data);
    if (data.is_split) {
        write_logs_csv(dir / "train.csv", data, data.train);
        write_logs_csv(dir / "test.csv", data, data.test);
    } else {
        write_logs_csv(dir / "logs.csv", data, data.logs);
    }
}

Dataset load_dataset(const fs::path& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(open_input(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, (dir / "manifest.json").string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "kcd-dataset" || manifest.value("version", 0) != 1) {
        fail(ErrorKind::parse, (dir / "manifest.json").string() + ": not a version-1 dataset manifest");
    }
    Dataset data;
    try {
        data.n_students = manifest.at("n_students").get<Index>();
        data.n_exercises = manifest.at("n_exercises").get<Index>();
        data.n_concepts = manifest.at("n_concepts").get<Index>();
        data.provenance.min_logs = manifest.at("min_logs").get<int>();
        data.provenance.train_ratio = manifest.at("train_ratio").get<double>();
        data.provenance.source = manifest.at("source").get<std::string>();
        if (!manifest.at("split_seed").is_null()) {
            data.provenance.split_seed = manifest.at("split_seed").get<std::uint64_t>();
        }
        data.is_split = manifest.at("is_split").get<bool>();
        data.student_ids = manifest.at("student_ids").get<std::vector<std::string>>();
        data.exercise_ids = manifest.at("exercise_ids").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, (dir / "manifest.json").string() + ": " + e.what());
    }

    QFile qfile = read_q(dir / "q.csv");
    if (qfile.ids != data.exercise_ids || qfile.q.cols() != data.n_concepts) {
        fail(ErrorKind::integrity, (dir / "q.csv").string() + ": does not match the manifest");
    }
    data.q = std::move(qfile.q);
    std::unordered_map<std::string, Index> students;
    std::unordered_map<std::string, Index> exercises;
    for (std::size_t i = 0; i < data.student_ids.size(); ++i) students[data.student_ids[i]] = static_cast<Index>(i);
    for (std::size_t i = 0; i < data.exercise_ids.size(); ++i) exercises[data.exercise_ids[i]] = static_cast<Index>(i);
    if (data.is_split) {
        data.train = read_dense_logs(dir / "train.csv", students, exercises);
        data.test = read_dense_logs(dir / "test.csv", students, exercises);
        data.logs = data.train;
        data.logs.insert(data.logs.end(), data.test.begin(), data.test.end());
    } else {
        data.logs = read_dense_logs(dir / "logs.csv", students, exercises);
    }
    return data;
}

void SynthSpec::validate() const {
    if (n_students < 1 || n_exercises < 1 || n_concepts < 1) {
        fail(ErrorKind::config, "synthetic spec needs N, M, K >= 1");
    }
    auto in_unit = [](double lo, double hi) { return 0.0 <= lo && lo <= hi && hi <= 1.0; };
    if (!in_unit(guess_min, guess_max)) fail(ErrorKind::config, "guess range must satisfy 0 <= min <= max <= 1");
    if (!in_unit(slip_min, slip_max)) fail(ErrorKind::config, "slip range must satisfy 0 <= min <= max <= 1");
    if (!prevalence.empty()) {
        if (static_cast<Index>(prevalence.size()) != n_concepts) {
            fail(ErrorKind::config, "prevalence needs one value per concept");
        }
        for (double p : prevalence) {
            if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::config, "prevalence values must lie in [0, 1]");
        }
    }
    if (!(q_density > 0.0 && q_density <= 1.0)) fail(ErrorKind::config, "Q density must lie in (0, 1]");
    if (!(response_rate > 0.0 && response_rate <= 1.0)) {
        fail(ErrorKind::config, "response rate must lie in (0, 1]");
    }
}

bool SynthSpec::identifiable() const {
    return guess_min > 0.0 && guess_max < 0.5 && slip_min > 0.0 && slip_max < 0.5;
}

SynthResult synth_dina(const SynthSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const Index N = spec.n_students;
    const Index M = spec.n_exercises;
    const Index K = spec.n_concepts;

    SynthResult result;
    result.guess.resize(static_cast<std::size_t>(M));
    result.slip.resize(static_cast<std::size_t>(M));
    for (Index j = 0; j < M; ++j) {
        result.guess[static_cast<std::size_t>(j)] = spec.guess_min + (spec.guess_max - spec.guess_min) * unit(rng);
        result.slip[static_cast<std::size_t>(j)] = spec.slip_min + (spec.slip_max - spec.slip_min) * unit(rng);
    }

    Matrix q = Matrix::Zero(M, K);
    for (Index j = 0; j < M; ++j) {
        for (Index c = 0; c < K; ++c) q(j, c) = unit(rng) < spec.q_density ? 1.0 : 0.0;
        if (q.row(j).sum() == 0.0) q(j, static_cast<Index>(rng() % static_cast<std::uint64_t>(K))) = 1.0;
    }
    for (Index c = 0; c < K; ++c) {
        if (q.col(c).sum() == 0.0) q(static_cast<Index>(rng() % static_cast<std::uint64_t>(M)), c) = 1.0;
    }

    result.mastery = Matrix::Zero(N, K);
    for (Index s = 0; s < N; ++s) {
        for (Index c = 0; c < K; ++c) {
            const double p = spec.prevalence.empty() ? 0.5 : spec.prevalence[static_cast<std::size_t>(c)];
            result.mastery(s, c) = unit(rng) < p ? 1.0 : 0.0;
        }
    }

    Dataset& data = result.data;
    data.n_students = N;
    data.n_exercises = M;
    data.n_concepts = K;
    data.q = q;
    for (Index s = 0; s < N; ++s) data.student_ids.push_back(std::to_string(s));
    for (Index j = 0; j < M; ++j) data.exercise_ids.push_back(std::to_string(j));
    for (Index s = 0; s < N; ++s) {
        for (Index j = 0; j < M; ++j) {
            if (spec.response_rate < 1.0 && unit(rng) >= spec.response_rate) continue;
            bool knows_all = true;
            for (Index c = 0; c < K; ++c) {
                if (q(j, c) != 0.0 && result.mastery(s, c) == 0.0) knows_all = false;
            }
            // g^(1 - nt) * (1 - sl)^nt with binary nt
            const double p_correct = knows_all ? 1.0 - result.slip[static_cast<std::size_t>(j)]
                                               : result.guess[static_cast<std::size_t>(j)];
            data.logs.push_back({s, j, unit(rng) < p_correct ? 1 : 0});
        }
    }
    data.provenance.source = "synthetic:dina:seed=" + std::to_string(spec.seed);
    data.provenance.min_logs = 0;
    return result;
}

}  // namespace kcd
