#include "kcd/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "kcd/checkpoint.hpp"
#include "kcd/data.hpp"
#include "kcd/model.hpp"
#include "kcd/train.hpp"
#include "kcd/viz.hpp"

namespace kcd {

namespace fs = std::filesystem;

namespace {

// Everything a command can read, with the defaults of a paper-default run.
struct RunConfig {
    std::string config;
    std::uint64_t seed = 0;
    std::string out = "kcd-out";

    std::string variant;
    std::string data;
    std::string logs;
    std::string q;
    int min_logs = default_min_logs;
    double train_ratio = 0.7;

    Index batch_size = 128;
    int epochs = 20;
    double lr = 0.002;
    double temperature_start = 1.0;
    double temperature_end = 0.3;
    std::string noise_redraw = "batch";
    bool project_monotone = true;

    int k_heads = 2;
    double grid_lo = -1.0;
    double grid_hi = 1.0;
    int grid_intervals = 5;
    int grid_degree = 3;
    std::vector<Index> ncd_hidden{256, 128};

    std::string checkpoint;
    std::string history;
    bool train_split = false;
    std::vector<std::string> students;
    std::string kan;
    double threshold = 0.05;
    std::string format = "dot";

    Index n_students = 300;
    Index n_exercises = 30;
    Index n_concepts = 5;
    double guess_min = 0.05;
    double guess_max = 0.25;
    double slip_min = 0.05;
    double slip_max = 0.25;
    double q_density = 0.35;
    double response_rate = 1.0;
    std::vector<double> prevalence;
};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
}

std::ofstream open_output(const fs::path& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorKind::io, "cannot write " + path.string());
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Flat `key = value` lines; '#' starts a comment line. Underscores in keys
// are read as dashes, so `batch_size` and `batch-size` both name --batch-size.
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
    if (!fs::exists(path)) fail(ErrorKind::io, "config file not found: " + path.string());
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open " + path.string());
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        const std::string where = path.string() + ":" + std::to_string(line_no);
        if (eq == std::string::npos) fail(ErrorKind::config, where + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) fail(ErrorKind::config, where + ": empty key");
        std::replace(key.begin(), key.end(), '_', '-');
        if (key == "config") fail(ErrorKind::config, where + ": config files cannot include other config files");
        for (const auto& [k, v] : out) {
            if (k == key) fail(ErrorKind::config, where + ": duplicate key '" + key + "'");
        }
        out.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

bool given_on_command_line(const std::vector<std::string>& args, const std::string& flag) {
    for (const auto& a : args) {
        if (a == "--") break;
        if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    }
    return false;
}

Variant require_variant(const std::string& name) {
    if (name.empty()) fail(ErrorKind::config, "no model variant given; expected one of: " + variant_list());
    const auto v = parse_variant(name);
    if (!v) fail(ErrorKind::config, "unknown variant '" + name + "'; expected one of: " + variant_list());
    return *v;
}

NoiseRedraw parse_noise_redraw(const std::string& s) {
    if (s == "batch") return NoiseRedraw::per_batch;
    if (s == "epoch") return NoiseRedraw::per_epoch;
    fail(ErrorKind::config, "noise-redraw must be 'batch' or 'epoch', got '" + s + "'");
}

fs::path checkpoint_path(const RunConfig& c) {
    return c.checkpoint.empty() ? fs::path(c.out) / "model.ckpt" : fs::path(c.checkpoint);
}

bool has_data(const RunConfig& c) {
    return !c.data.empty() || !c.logs.empty() || !c.q.empty() || fs::exists(fs::path(c.out) / "data" / "manifest.json");
}

// --data DIR, or --logs plus --q, or the dataset a train run left in --out.
Dataset load_input(const RunConfig& c, bool need_split) {
    Dataset data;
    if (!c.data.empty()) {
        if (!fs::exists(fs::path(c.data) / "manifest.json")) {
            fail(ErrorKind::io, "no dataset manifest at " + (fs::path(c.data) / "manifest.json").string());
        }
        data = load_dataset(c.data);
    } else if (!c.logs.empty() || !c.q.empty()) {
        if (c.logs.empty() || c.q.empty()) fail(ErrorKind::config, "--logs and --q must be given together");
        data = load_logs(c.logs, c.q, c.min_logs);
    } else if (fs::exists(fs::path(c.out) / "data" / "manifest.json")) {
        data = load_dataset(fs::path(c.out) / "data");
    } else {
        fail(ErrorKind::config, "no dataset: pass --data DIR or --logs FILE --q FILE");
    }
    if (need_split && !data.is_split) data = split(data, c.train_ratio, c.seed);
    return data;
}

void check_dims(const DiagnosisModel& model, const Dataset& data) {
    const auto& m = model.config;
    if (m.n_students != data.n_students || m.n_exercises != data.n_exercises || m.n_concepts != data.n_concepts) {
        fail(ErrorKind::integrity, "checkpoint is " + std::to_string(m.n_students) + " students x " +
                                       std::to_string(m.n_exercises) + " exercises x " +
                                       std::to_string(m.n_concepts) + " concepts, dataset is " +
                                       std::to_string(data.n_students) + " x " + std::to_string(data.n_exercises) +
                                       " x " + std::to_string(data.n_concepts));
    }
}

std::string metrics_line(const std::string& split_name, const Metrics& m) {
    return "split=" + split_name + " auc=" + num(m.auc) + " acc=" + num(m.acc) + " loss=" + num(m.loss) +
           " n=" + std::to_string(m.n_evaluated);
}

void cmd_train(const RunConfig& c, std::ostream& out) {
    const Variant variant = require_variant(c.variant);
    const Dataset data = load_input(c, true);

    ModelConfig mc;
    mc.variant = variant;
    mc.n_students = data.n_students;
    mc.n_exercises = data.n_exercises;
    mc.n_concepts = data.n_concepts;
    mc.k_heads = c.k_heads;
    mc.grid = SplineGrid{c.grid_lo, c.grid_hi, c.grid_intervals, c.grid_degree};
    mc.ncd_hidden = c.ncd_hidden;
    mc.seed = c.seed;
    DiagnosisModel model = make_model(mc, data.q);

    TrainConfig tc;
    tc.batch_size = c.batch_size;
    tc.epochs = c.epochs;
    tc.seed = c.seed;
    tc.adam.learning_rate = c.lr;
    tc.temperature_start = c.temperature_start;
    tc.temperature_end = c.temperature_end;
    tc.noise_redraw = parse_noise_redraw(c.noise_redraw);
    tc.project_monotone = c.project_monotone;
    tc.evaluate_each_epoch = !data.test.empty();

    const fs::path dir = c.out;
    fs::create_directories(dir);
    out << "training " << variant_name(variant) << " on " << data.n_students << " students, " << data.n_exercises
        << " exercises, " << data.n_concepts << " concepts (" << data.train.size() << " train / " << data.test.size()
        << " test logs)\n";
    const TrainHistory history = train(model, data, tc, [&](const EpochRecord& r) {
        out << "epoch " << r.epoch + 1 << '/' << tc.epochs << " train_loss=" << num(r.train_loss);
        if (tc.evaluate_each_epoch) out << " test_auc=" << num(r.test.auc) << " test_acc=" << num(r.test.acc);
        out << '\n';
    });

    save_checkpoint(model, dir / "model.ckpt", CheckpointInfo{c.seed});
    {
        auto h = open_output(dir / "history.jsonl");
        write_history(h, history);
    }
    save_dataset(data, dir / "data");
    out << "wrote " << (dir / "model.ckpt").string() << ", " << (dir / "history.jsonl").string() << ", "
        << (dir / "data").string() << '\n';
}

void cmd_eval(const RunConfig& c, std::ostream& out) {
    const fs::path ckpt = checkpoint_path(c);
    const DiagnosisModel model = load_checkpoint(ckpt);
    const Dataset data = load_input(c, false);
    check_dims(model, data);

    std::vector<std::string> lines{
        "checkpoint=" + ckpt.string(),
        "digest=" + file_digest(ckpt),
        "variant=" + std::string(variant_name(model.variant())),
        "epochs_trained=" + std::to_string(model.epochs_trained),
    };
    if (data.is_split) {
        if (!data.test.empty()) lines.push_back(metrics_line("test", evaluate(model, data.test)));
        if (c.train_split) lines.push_back(metrics_line("train", evaluate(model, data.train)));
    } else {
        lines.push_back(metrics_line("all", evaluate(model, data.logs)));
    }
    fs::create_directories(c.out);
    const fs::path report = fs::path(c.out) / "eval_report.txt";
    auto file = open_output(report);
    for (const auto& l : lines) {
        file << l << '\n';
        if (l.rfind("split=", 0) == 0) out << l << '\n';
    }
    out << "wrote " << report.string() << '\n';
}

void cmd_diagnose(const RunConfig& c, std::ostream& out, std::ostream& err) {
    const DiagnosisModel model = load_checkpoint(checkpoint_path(c));
    std::optional<Dataset> data;
    if (has_data(c)) {
        data = load_input(c, false);
        check_dims(model, *data);
    }
    const Index n = model.config.n_students;

    auto label = [&](Index s) { return data ? data->student_ids[static_cast<std::size_t>(s)] : std::to_string(s); };
    std::vector<Index> chosen;
    if (c.students.empty()) {
        for (Index s = 0; s < n; ++s) chosen.push_back(s);
    } else {
        std::map<std::string, Index> by_label;
        for (Index s = 0; s < n; ++s) by_label.emplace(label(s), s);
        for (const auto& id : c.students) {
            auto it = by_label.find(id);
            if (it == by_label.end()) {
                fail(ErrorKind::lookup, "unknown student id '" + id + "'" +
                                            (data ? "" : " (without --data, ids are 0.." + std::to_string(n - 1) + ")"));
            }
            chosen.push_back(it->second);
        }
    }
    if (model.epochs_trained == 0) err << "warning: checkpoint is untrained; mastery values reflect initialisation\n";

    fs::create_directories(c.out);
    const fs::path path = fs::path(c.out) / "mastery.csv";
    auto file = open_output(path);
    file << "student_id";
    for (Index k = 0; k < model.config.n_concepts; ++k) file << ",c_" << k;
    file << '\n';
    std::string source;
    for (Index s : chosen) {
        const auto exercises = data ? data->exercises_of(s) : std::vector<Index>{};
        const MasteryVector m = mastery(model, s, exercises);
        source = m.source;
        file << label(s);
        for (Index k = 0; k < m.values.size(); ++k) file << ',' << num(m.values(k));
        file << '\n';
    }
    out << "wrote " << chosen.size() << " mastery rows (" << source << ") to " << path.string() << '\n';
}

void cmd_viz(const RunConfig& c, std::ostream& out) {
    const DiagnosisModel model = load_checkpoint(checkpoint_path(c));
    if (model.kans.empty()) {
        fail(ErrorKind::capability, std::string(variant_name(model.variant())) + " has no KAN sub-networks to visualize");
    }
    const std::string name = !c.kan.empty() ? c.kan : model.kans.count("up") ? "up" : model.kan_names().front();
    const KanNetwork& net = require_kan(model, name);

    // Score edges on the training pairs when a dataset is at hand, otherwise
    // on every (student, exercise) pair, thinned to a fixed budget.
    std::vector<Index> students;
    std::vector<Index> exercises;
    if (has_data(c)) {
        const Dataset data = load_input(c, false);
        check_dims(model, data);
        for (const auto& t : data.is_split ? data.train : data.logs) {
            students.push_back(t.student);
            exercises.push_back(t.exercise);
        }
    } else {
        const Index total = model.config.n_students * model.config.n_exercises;
        const Index stride = std::max<Index>(1, total / 20000);
        for (Index i = 0; i < total; i += stride) {
            students.push_back(i / model.config.n_exercises);
            exercises.push_back(i % model.config.n_exercises);
        }
    }
    const KanGraph graph = build_kan_graph(net, name, kan_input_sample(model, name, students, exercises), c.threshold);

    fs::create_directories(c.out);
    const fs::path path = fs::path(c.out) / (name + "." + c.format);
    auto file = open_output(path);
    file << (c.format == "svg" ? to_svg(graph) : to_dot(graph));
    out << "kan=" << name << " kept=" << graph.edges.size() << " total=" << graph.total_edges
        << " fraction=" << num(graph.surviving_fraction()) << " threshold=" << c.threshold << " -> " << path.string()
        << '\n';
}

void cmd_synth(const RunConfig& c, std::ostream& out) {
    SynthSpec spec;
    spec.n_students = c.n_students;
    spec.n_exercises = c.n_exercises;
    spec.n_concepts = c.n_concepts;
    spec.guess_min = c.guess_min;
    spec.guess_max = c.guess_max;
    spec.slip_min = c.slip_min;
    spec.slip_max = c.slip_max;
    spec.prevalence = c.prevalence;
    spec.q_density = c.q_density;
    spec.response_rate = c.response_rate;
    spec.seed = c.seed;
    const SynthResult result = synth_dina(spec);

    const fs::path dir = c.out;
    save_dataset(result.data, dir);
    {
        auto f = open_output(dir / "mastery.csv");
        f << "student_id";
        for (Index k = 0; k < spec.n_concepts; ++k) f << ",c_" << k;
        f << '\n';
        for (Index s = 0; s < result.mastery.rows(); ++s) {
            f << result.data.student_ids[static_cast<std::size_t>(s)];
            for (Index k = 0; k < result.mastery.cols(); ++k) f << ',' << static_cast<int>(result.mastery(s, k));
            f << '\n';
        }
    }
    {
        auto f = open_output(dir / "exercise_params.csv");
        f << "exercise_id,guess,slip\n";
        for (std::size_t j = 0; j < result.guess.size(); ++j) {
            f << result.data.exercise_ids[j] << ',' << num(result.guess[j]) << ',' << num(result.slip[j]) << '\n';
        }
    }
    out << "wrote " << result.data.logs.size() << " logs for " << spec.n_students << " students to " << dir.string()
        << (spec.identifiable() ? "" : " (warning: some exercises are not identifiable)") << '\n';
}

void cmd_report(const RunConfig& c, std::ostream& out) {
    const fs::path ckpt = checkpoint_path(c);
    CheckpointInfo info;
    const DiagnosisModel model = load_checkpoint(ckpt, &info);
    const auto& m = model.config;
    Index count = 0;
    for (const auto& p : model.parameters()) count += p.tensor.value().size();
    out << "checkpoint=" << ckpt.string() << '\n';
    out << "digest=" << file_digest(ckpt) << '\n';
    out << "format_version=" << checkpoint_version << '\n';
    out << "variant=" << variant_name(m.variant) << '\n';
    out << "students=" << m.n_students << " exercises=" << m.n_exercises << " concepts=" << m.n_concepts << '\n';
    out << "epochs_trained=" << model.epochs_trained << " train_seed=" << info.train_seed << " model_seed=" << m.seed
        << '\n';
    out << "parameters=" << count << '\n';
    for (const auto& [name, net] : model.kans) {
        out << "kan=" << name << " widths=";
        const auto w = net.widths();
        for (std::size_t i = 0; i < w.size(); ++i) out << (i ? "," : "") << w[i];
        out << " renorm=" << renormalization_name(net.renorm) << '\n';
    }

    const fs::path history_path = c.history.empty() ? fs::path(c.out) / "history.jsonl" : fs::path(c.history);
    if (!c.history.empty() && !fs::exists(history_path)) fail(ErrorKind::io, "history not found: " + history_path.string());
    if (!fs::exists(history_path)) return;
    std::ifstream in(history_path);
    const TrainHistory history = read_history(in);
    out << "history=" << history_path.string() << " epochs=" << history.epochs.size() << '\n';
    for (const auto& r : history.epochs) {
        out << "epoch=" << r.epoch + 1 << " train_loss=" << num(r.train_loss) << " test_auc=" << num(r.test.auc)
            << " test_acc=" << num(r.test.acc) << " test_loss=" << num(r.test.loss) << '\n';
    }
    if (!history.epochs.empty()) out << "final " << metrics_line("test", history.epochs.back().test) << '\n';
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
    RunConfig c;
    CLI::App app{"Cognitive diagnosis with Kolmogorov-Arnold networks", "kcd"};
    app.require_subcommand(1);
    app.add_option("--config", c.config, "Flat key = value file; command-line flags win");
    app.add_option("--seed", c.seed, "Seed for splitting, initialisation, batching and synthesis")->capture_default_str();
    app.add_option("--out", c.out, "Output directory")->capture_default_str();

    auto data_options = [&](CLI::App* s) {
        s->add_option("--data", c.data, "Dataset directory (manifest.json, q.csv, logs)");
        s->add_option("--logs", c.logs, "Response log CSV: student_id,exercise_id,score");
        s->add_option("--q", c.q, "Q-matrix CSV: exercise_id,c_0,...");
        s->add_option("--min-logs", c.min_logs, "Drop students with fewer responses")->capture_default_str();
        s->add_option("--train-ratio", c.train_ratio, "Per-student training share")->capture_default_str();
    };
    auto checkpoint_option = [&](CLI::App* s) {
        s->add_option("--checkpoint", c.checkpoint, "Checkpoint file (default: <out>/model.ckpt)");
    };

    auto* train = app.add_subcommand("train", "Train a model and write checkpoint, history and dataset");
    train->add_option("--variant", c.variant, "Model variant: " + variant_list());
    data_options(train);
    train->add_option("--batch-size", c.batch_size)->capture_default_str();
    train->add_option("--epochs", c.epochs)->capture_default_str();
    train->add_option("--lr", c.lr, "Adam learning rate")->capture_default_str();
    train->add_option("--temperature-start", c.temperature_start, "DINA relaxation temperature, first epoch")
        ->capture_default_str();
    train->add_option("--temperature-end", c.temperature_end, "DINA relaxation temperature, last epoch")
        ->capture_default_str();
    train->add_option("--noise-redraw", c.noise_redraw, "DINA noise: batch or epoch")->capture_default_str();
    train->add_flag("--project-monotone,!--no-project-monotone", c.project_monotone,
                    "Clamp monotone weights at zero after each step");
    train->add_option("--k-heads", c.k_heads, "Heads of the two-level models")->capture_default_str();
    train->add_option("--grid-lo", c.grid_lo)->capture_default_str();
    train->add_option("--grid-hi", c.grid_hi)->capture_default_str();
    train->add_option("--grid-intervals", c.grid_intervals)->capture_default_str();
    train->add_option("--grid-degree", c.grid_degree)->capture_default_str();
    train->add_option("--ncd-hidden", c.ncd_hidden, "Hidden widths of the NCD-family predictors")
        ->delimiter(',')
        ->capture_default_str();

    auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
    checkpoint_option(eval);
    data_options(eval);
    eval->add_flag("--train-split", c.train_split, "Also report the training split");

    auto* diagnose = app.add_subcommand("diagnose", "Write per-concept mastery rows");
    checkpoint_option(diagnose);
    data_options(diagnose);
    diagnose->add_option("--students", c.students, "Student ids (default: all)")->delimiter(',');

    auto* viz = app.add_subcommand("viz", "Draw the surviving structure of a KAN");
    checkpoint_option(viz);
    data_options(viz);
    viz->add_option("--kan", c.kan, "Sub-network name (default: up, or the first KAN)");
    viz->add_option("--threshold", c.threshold, "Relative importance below which edges are dropped")
        ->capture_default_str();
    viz->add_option("--format", c.format)->check(CLI::IsMember({"dot", "svg"}))->capture_default_str();

    auto* synth = app.add_subcommand("synth", "Generate a DINA dataset with known mastery");
    synth->add_option("--n-students", c.n_students)->capture_default_str();
    synth->add_option("--n-exercises", c.n_exercises)->capture_default_str();
    synth->add_option("--n-concepts", c.n_concepts)->capture_default_str();
    synth->add_option("--guess-min", c.guess_min)->capture_default_str();
    synth->add_option("--guess-max", c.guess_max)->capture_default_str();
    synth->add_option("--slip-min", c.slip_min)->capture_default_str();
    synth->add_option("--slip-max", c.slip_max)->capture_default_str();
    synth->add_option("--q-density", c.q_density)->capture_default_str();
    synth->add_option("--response-rate", c.response_rate)->capture_default_str();
    synth->add_option("--prevalence", c.prevalence, "Per-concept mastery rates")->delimiter(',');

    auto* report = app.add_subcommand("report", "Describe a checkpoint and its training history");
    checkpoint_option(report);
    report->add_option("--history", c.history, "Training log (default: <out>/history.jsonl when present)");

    for (auto* s : app.get_subcommands({})) s->fallthrough();

    try {
        std::vector<std::string> args = raw_args;
        // Config keys become flags unless the same flag was given explicitly.
        std::string config_path;
        for (std::size_t i = 0; i < args.size(); ++i) {
            if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
            if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
        }
        if (!config_path.empty()) {
            CLI::App* chosen = nullptr;
            for (const auto& a : args) {
                for (auto* s : app.get_subcommands({})) {
                    if (a == s->get_name()) chosen = s;
                }
                if (chosen) break;
            }
            for (const auto& [key, value] : read_config(config_path)) {
                const std::string flag = "--" + key;
                const bool known = app.get_option_no_throw(flag) != nullptr ||
                                   (chosen && chosen->get_option_no_throw(flag) != nullptr);
                if (!known) {
                    fail(ErrorKind::config, config_path + ": unknown key '" + key + "'" +
                                                (chosen ? " for " + chosen->get_name() : ""));
                }
                if (!given_on_command_line(args, flag)) args.push_back(flag + "=" + value);
            }
        }
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);

        if (*train) cmd_train(c, out);
        else if (*eval) cmd_eval(c, out);
        else if (*diagnose) cmd_diagnose(c, out, err);
        else if (*viz) cmd_viz(c, out);
        else if (*synth) cmd_synth(c, out);
        else if (*report) cmd_report(c, out);
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error[usage]: " << one_line(e.what()) << '\n';
        return 2;
    } catch (const Error& e) {
        err << "error[" << error_kind_name(e.kind()) << "]: " << one_line(e.what()) << '\n';
        return e.kind() == ErrorKind::config ? 2 : 1;
    } catch (const fs::filesystem_error& e) {
        err << "error[io]: " << one_line(e.what()) << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error[internal]: " << one_line(e.what()) << '\n';
        return 1;
    }
}

}  // namespace kcd
