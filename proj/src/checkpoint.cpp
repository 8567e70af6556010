#include "kcd/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace kcd {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

constexpr std::string_view magic = "KCD-CHECKPOINT";

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& what) {
    fail(ErrorKind::checkpoint, path.string() + ": " + what);
}

template <typename T>
T parse_number(const std::filesystem::path& path, const std::string& key, const std::string& text) {
    T value{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (ec != std::errc() || ptr != end) corrupt(path, "bad value for '" + key + "': '" + text + "'");
    return value;
}

double parse_double(const std::filesystem::path& path, const std::string& key, const std::string& text) {
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size()) {
        corrupt(path, "bad value for '" + key + "': '" + text + "'");
    }
    return v;
}

struct TensorEntry {
    std::string name;
    Index rows = 0;
    Index cols = 0;
};

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return hex64(fnv1a64(buf.str()));
}

void save_checkpoint(const DiagnosisModel& model, const std::filesystem::path& path, const CheckpointInfo& info) {
    const ModelConfig& c = model.config;
    std::vector<NamedTensor> tensors{{"q", Tensor::constant(model.q)}};
    for (auto& p : model.parameters()) tensors.push_back(std::move(p));

    std::string payload;
    for (const auto& t : tensors) {
        const Matrix& v = t.tensor.value();
        payload.append(reinterpret_cast<const char*>(v.data()), static_cast<std::size_t>(v.size()) * sizeof(double));
    }

    std::ostringstream head;
    head << magic << ' ' << checkpoint_version << '\n';
    head << "variant " << variant_name(c.variant) << '\n';
    head << "n_students " << c.n_students << '\n';
    head << "n_exercises " << c.n_exercises << '\n';
    head << "n_concepts " << c.n_concepts << '\n';
    head << "k_heads " << c.k_heads << '\n';
    head << "grid_lo " << format_double(c.grid.lo) << '\n';
    head << "grid_hi " << format_double(c.grid.hi) << '\n';
    head << "grid_intervals " << c.grid.intervals << '\n';
    head << "grid_degree " << c.grid.degree << '\n';
    head << "ncd_hidden ";
    if (c.ncd_hidden.empty()) head << '-';
    for (std::size_t i = 0; i < c.ncd_hidden.size(); ++i) head << (i ? "," : "") << c.ncd_hidden[i];
    head << '\n';
    head << "model_seed " << c.seed << '\n';
    head << "temperature " << format_double(model.temperature) << '\n';
    head << "epochs_trained " << model.epochs_trained << '\n';
    head << "train_seed " << info.train_seed << '\n';
    for (const auto& t : tensors) head << "tensor " << t.name << ' ' << t.tensor.rows() << ' ' << t.tensor.cols() << '\n';
    head << "payload " << payload.size() << ' ' << hex64(fnv1a64(payload)) << '\n';
    head << "end\n";

    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write " + path.string());
    out << head.str();
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) fail(ErrorKind::io, "failed writing " + path.string());
}

DiagnosisModel load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open checkpoint " + path.string());

    std::string line;
    if (!std::getline(in, line)) corrupt(path, "empty file");
    {
        std::istringstream first(line);
        std::string word;
        int version = 0;
        if (!(first >> word) || word != magic) corrupt(path, "not a checkpoint (bad magic)");
        if (!(first >> version)) corrupt(path, "missing format version");
        if (version != checkpoint_version) {
            corrupt(path, "unsupported format version " + std::to_string(version) + " (expected " +
                              std::to_string(checkpoint_version) + ")");
        }
    }

    std::map<std::string, std::string> kv;
    std::vector<TensorEntry> entries;
    std::size_t payload_bytes = 0;
    std::string payload_hash;
    bool ended = false;
    while (std::getline(in, line)) {
        if (line == "end") {
            ended = true;
            break;
        }
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "tensor") {
            TensorEntry e;
            if (!(ls >> e.name >> e.rows >> e.cols) || e.rows < 0 || e.cols < 0) corrupt(path, "bad tensor line: " + line);
            entries.push_back(e);
        } else if (key == "payload") {
            if (!(ls >> payload_bytes >> payload_hash)) corrupt(path, "bad payload line: " + line);
        } else {
            std::string value;
            if (!(ls >> value)) corrupt(path, "bad header line: " + line);
            kv[key] = value;
        }
    }
    if (!ended) corrupt(path, "truncated header");

    auto get = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) corrupt(path, "missing header field '" + key + "'");
        return it->second;
    };

    ModelConfig c;
    const auto variant = parse_variant(get("variant"));
    if (!variant) corrupt(path, "unknown variant '" + get("variant") + "'");
    c.variant = *variant;
    c.n_students = parse_number<Index>(path, "n_students", get("n_students"));
    c.n_exercises = parse_number<Index>(path, "n_exercises", get("n_exercises"));
    c.n_concepts = parse_number<Index>(path, "n_concepts", get("n_concepts"));
    c.k_heads = parse_number<int>(path, "k_heads", get("k_heads"));
    c.grid.lo = parse_double(path, "grid_lo", get("grid_lo"));
    c.grid.hi = parse_double(path, "grid_hi", get("grid_hi"));
    c.grid.intervals = parse_number<int>(path, "grid_intervals", get("grid_intervals"));
    c.grid.degree = parse_number<int>(path, "grid_degree", get("grid_degree"));
    c.ncd_hidden.clear();
    if (get("ncd_hidden") != "-") {
        std::stringstream hs(get("ncd_hidden"));
        std::string part;
        while (std::getline(hs, part, ',')) c.ncd_hidden.push_back(parse_number<Index>(path, "ncd_hidden", part));
    }
    c.seed = parse_number<std::uint64_t>(path, "model_seed", get("model_seed"));

    std::string payload(payload_bytes, '\0');
    in.read(payload.data(), static_cast<std::streamsize>(payload_bytes));
    if (static_cast<std::size_t>(in.gcount()) != payload_bytes) corrupt(path, "truncated payload");
    if (in.peek() != std::ifstream::traits_type::eof()) corrupt(path, "trailing bytes after payload");
    if (hex64(fnv1a64(payload)) != payload_hash) corrupt(path, "payload checksum mismatch");

    std::map<std::string, Matrix> values;
    std::size_t offset = 0;
    for (const auto& e : entries) {
        const std::size_t bytes = static_cast<std::size_t>(e.rows * e.cols) * sizeof(double);
        if (offset + bytes > payload.size()) corrupt(path, "payload shorter than the tensor table");
        Matrix m(e.rows, e.cols);
        std::memcpy(m.data(), payload.data() + offset, bytes);
        offset += bytes;
        if (!values.emplace(e.name, std::move(m)).second) corrupt(path, "duplicate tensor '" + e.name + "'");
    }
    if (offset != payload.size()) corrupt(path, "payload longer than the tensor table");

    auto q = values.find("q");
    if (q == values.end()) corrupt(path, "missing Q-matrix");
    DiagnosisModel model;
    try {
        model = make_model(c, q->second);
    } catch (const Error& e) {
        corrupt(path, std::string("inconsistent model settings: ") + e.what());
    }
    auto params = model.parameters();
    if (params.size() + 1 != values.size()) corrupt(path, "tensor set does not match the variant");
    for (auto& p : params) {
        auto it = values.find(p.name);
        if (it == values.end()) corrupt(path, "missing tensor '" + p.name + "'");
        if (it->second.rows() != p.tensor.rows() || it->second.cols() != p.tensor.cols()) {
            corrupt(path, "tensor '" + p.name + "' has the wrong shape");
        }
        p.tensor.mutable_value() = it->second;
    }
    model.temperature = parse_double(path, "temperature", get("temperature"));
    model.epochs_trained = parse_number<int>(path, "epochs_trained", get("epochs_trained"));
    if (info) info->train_seed = parse_number<std::uint64_t>(path, "train_seed", get("train_seed"));
    return model;
}

}  // namespace kcd
