#include <doctest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include "kcd/checkpoint.hpp"
#include "kcd/cli.hpp"
#include "kcd/data.hpp"
#include "kcd/train.hpp"
#include "support/dot_grammar.hpp"
#include "support/tempdir.hpp"

using namespace kcd;
using kcd::testing::read_file;
using kcd::testing::TempDir;

namespace {

struct Run {
    int code = 0;
    std::string out;
    std::string err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream out;
    std::ostringstream err;
    Run r;
    r.code = run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

// Failures print exactly one machine-parseable line.
void check_failure(const Run& r, int code, const std::string& kind) {
    CHECK(r.code == code);
    CHECK(r.err.rfind("error[" + kind + "]: ", 0) == 0);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
}

std::vector<std::string> small_synth(const TempDir& dir, const std::string& name = "syn") {
    return {"--seed", "5", "--out", (dir / name).string(), "synth", "--n-students", "40", "--n-exercises", "10",
            "--n-concepts", "3"};
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

}  // namespace

TEST_CASE("cli synth writes data that loads back and is seed-stable") {
    TempDir dir;
    REQUIRE(run(small_synth(dir)).code == 0);
    const auto data = load_logs(dir / "syn/logs.csv", dir / "syn/q.csv", 0);
    CHECK(data.n_students == 40);
    CHECK(data.n_exercises == 10);
    CHECK(data.n_concepts == 3);
    CHECK(data.logs.size() == 400);
    CHECK(load_dataset(dir / "syn").logs == data.logs);

    const auto truth = lines_of(read_file(dir / "syn/mastery.csv"));
    CHECK(truth.size() == 41);
    CHECK(truth[0] == "student_id,c_0,c_1,c_2");

    REQUIRE(run(small_synth(dir, "again")).code == 0);
    for (const char* f : {"logs.csv", "q.csv", "mastery.csv", "manifest.json", "exercise_params.csv"}) {
        CHECK(read_file(dir / "syn" / f) == read_file(dir / "again" / f));
    }

    check_failure(run({"--out", (dir / "zero").string(), "synth", "--n-students", "0"}), 2, "config");
}

TEST_CASE("cli train, eval, diagnose, viz, report") {
    TempDir dir;
    REQUIRE(run(small_synth(dir)).code == 0);
    const std::string out = (dir / "run").string();
    const std::string data = (dir / "syn").string();
    const auto trained =
        run({"--seed", "5", "--out", out, "train", "--variant", "ka2ncd-e", "--data", data, "--epochs", "3"});
    REQUIRE_MESSAGE(trained.code == 0, trained.err);
    CHECK(std::filesystem::exists(dir / "run/model.ckpt"));
    std::ifstream hin(dir / "run/history.jsonl");
    const auto history = read_history(hin);
    REQUIRE(history.epochs.size() == 3);

    SUBCASE("eval reproduces the last epoch and labels splits") {
        const auto r = run({"--out", out, "eval", "--train-split"});
        REQUIRE_MESSAGE(r.code == 0, r.err);
        const auto report = read_file(dir / "run/eval_report.txt");
        const std::regex test_line("split=test auc=([0-9.]+) acc=([0-9.]+) loss=([0-9.]+) n=([0-9]+)");
        std::smatch m;
        REQUIRE(std::regex_search(report, m, test_line));
        const auto& last = history.epochs.back().test;
        CHECK(std::stod(m[1]) == doctest::Approx(last.auc).epsilon(1e-6));
        CHECK(std::stod(m[2]) == doctest::Approx(last.acc).epsilon(1e-6));
        CHECK(std::stol(m[4]) == last.n_evaluated);
        CHECK(report.find("split=train ") != std::string::npos);
        CHECK(report.find("digest=" + file_digest(dir / "run/model.ckpt")) != std::string::npos);

        // Exact agreement, through the library.
        const auto model = load_checkpoint(dir / "run/model.ckpt");
        const auto saved = load_dataset(dir / "run/data");
        CHECK(evaluate(model, saved.test).auc == last.auc);
        CHECK(evaluate(model, saved.test).loss == last.loss);

        const auto no_train = run({"--out", out, "eval"});
        CHECK(read_file(dir / "run/eval_report.txt").find("split=train") == std::string::npos);
        CHECK(no_train.code == 0);
    }
    SUBCASE("eval rejects mismatched data and corrupt checkpoints") {
        REQUIRE(run({"--seed", "5", "--out", (dir / "other").string(), "synth", "--n-students", "30",
                     "--n-exercises", "10", "--n-concepts", "3"})
                    .code == 0);
        check_failure(run({"--out", out, "eval", "--data", (dir / "other").string()}), 1, "integrity");

        std::string bytes = read_file(dir / "run/model.ckpt");
        bytes[bytes.size() - 3] ^= 1;
        std::ofstream(dir / "bad.ckpt", std::ios::binary) << bytes;
        check_failure(run({"--out", out, "eval", "--checkpoint", (dir / "bad.ckpt").string()}), 1, "checkpoint");
    }
    SUBCASE("diagnose") {
        REQUIRE(run({"--out", out, "diagnose", "--students", "3"}).code == 0);
        auto rows = lines_of(read_file(dir / "run/mastery.csv"));
        REQUIRE(rows.size() == 2);
        CHECK(rows[0] == "student_id,c_0,c_1,c_2");
        CHECK(rows[1].rfind("3,", 0) == 0);
        CHECK(std::count(rows[1].begin(), rows[1].end(), ',') == 3);

        REQUIRE(run({"--out", out, "diagnose"}).code == 0);
        CHECK(lines_of(read_file(dir / "run/mastery.csv")).size() == 41);

        check_failure(run({"--out", out, "diagnose", "--students", "nobody"}), 1, "lookup");
    }
    SUBCASE("viz") {
        const auto a = run({"--out", out, "viz", "--threshold", "0.05"});
        REQUIRE_MESSAGE(a.code == 0, a.err);
        const auto dot = read_file(dir / "run/up.dot");
        const auto check = kcd::testing::check_dot(dot);
        CHECK_MESSAGE(check.ok, check.error);
        REQUIRE(run({"--out", out, "viz", "--threshold", "0.05"}).code == 0);
        CHECK(read_file(dir / "run/up.dot") == dot);

        REQUIRE(run({"--out", out, "viz", "--kan", "low.1", "--format", "svg"}).code == 0);
        CHECK(read_file(dir / "run/low.1.svg").rfind("<svg", 0) == 0);
        check_failure(run({"--out", out, "viz", "--kan", "nope"}), 1, "capability");
        check_failure(run({"--out", out, "viz", "--format", "png"}), 2, "usage");
    }
    SUBCASE("report") {
        const auto r = run({"--out", out, "report"});
        REQUIRE(r.code == 0);
        CHECK(r.out.find("variant=KA2NCDe") != std::string::npos);
        CHECK(r.out.find("epochs_trained=3 train_seed=5") != std::string::npos);
        CHECK(r.out.find("kan=up widths=6,3,1") != std::string::npos);
        CHECK(r.out.find("history=") != std::string::npos);
        CHECK(r.out.find("epoch=3 train_loss=") != std::string::npos);
        CHECK(r.out.find("final split=test auc=") != std::string::npos);
        check_failure(run({"--out", out, "report", "--history", out + "/none.jsonl"}), 1, "io");
    }
}

TEST_CASE("cli viz on a model without KANs is a capability error") {
    TempDir dir;
    REQUIRE(run(small_synth(dir)).code == 0);
    const std::string out = (dir / "run").string();
    REQUIRE(run({"--out", out, "train", "--variant", "NCD", "--data", (dir / "syn").string(), "--epochs", "1",
                 "--ncd-hidden", "8,4"})
                .code == 0);
    check_failure(run({"--out", out, "viz"}), 1, "capability");
}

TEST_CASE("cli input errors") {
    TempDir dir;
    REQUIRE(run(small_synth(dir)).code == 0);
    const std::string data = (dir / "syn").string();

    const auto unknown = run({"--out", (dir / "r").string(), "train", "--variant", "NCD++", "--data", data});
    check_failure(unknown, 2, "config");
    for (const char* name : {"IRT", "DINA", "KaNCDplus", "KA2NCDe", "KA2NCDkan"}) {
        CHECK(unknown.err.find(name) != std::string::npos);
    }

    const std::string missing = (dir / "missing_q.csv").string();
    const auto no_q = run({"train", "--variant", "IRT", "--logs", data + "/logs.csv", "--q", missing});
    check_failure(no_q, 1, "io");
    CHECK(no_q.err.find(missing) != std::string::npos);

    check_failure(run({"train", "--variant", "IRT", "--data", (dir / "absent").string()}), 1, "io");
    check_failure(run({"train", "--variant", "IRT"}), 2, "config");
    check_failure(run({}), 2, "usage");
    check_failure(run({"eval", "--bogus"}), 2, "usage");
    check_failure(run({"--out", (dir / "r").string(), "report"}), 1, "io");
}

TEST_CASE("cli config files") {
    TempDir dir;
    REQUIRE(run(small_synth(dir)).code == 0);
    const auto cfg = dir.write("run.cfg",
                               "# flat settings\n"
                               "variant = IRT\n"
                               "data = " + (dir / "syn").string() + "\n"
                               "epochs = 4\n"
                               "batch_size = 16\n");
    const std::string out = (dir / "r").string();

    SUBCASE("values apply") {
        REQUIRE(run({"--config", cfg.string(), "--out", out, "train"}).code == 0);
        std::ifstream in(dir / "r/history.jsonl");
        CHECK(read_history(in).epochs.size() == 4);
    }
    SUBCASE("flags of the same name win") {
        REQUIRE(run({"--out", out, "train", "--config", cfg.string(), "--epochs", "2"}).code == 0);
        std::ifstream in(dir / "r/history.jsonl");
        CHECK(read_history(in).epochs.size() == 2);
    }
    SUBCASE("bad documents") {
        check_failure(run({"--config", dir.write("u.cfg", "colour = red\n").string(), "train"}), 2, "config");
        check_failure(run({"--config", dir.write("n.cfg", "epochs\n").string(), "train"}), 2, "config");
        check_failure(run({"--config", dir.write("d.cfg", "epochs = 1\nepochs = 2\n").string(), "train"}), 2,
                      "config");
        check_failure(run({"--config", (dir / "none.cfg").string(), "train"}), 1, "io");
    }
}
