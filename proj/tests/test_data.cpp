#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "kcd/data.hpp"
#include "support/tempdir.hpp"

using namespace kcd;
using kcd::testing::TempDir;

namespace {

std::string q_text(int n_exercises, int k) {
    std::ostringstream out;
    out << "exercise_id";
    for (int c = 0; c < k; ++c) out << ",c_" << c;
    out << '\n';
    for (int j = 0; j < n_exercises; ++j) {
        out << "e" << j;
        for (int c = 0; c < k; ++c) out << ',' << (c == j % k ? 1 : 0);
        out << '\n';
    }
    return out.str();
}

std::string logs_text(const std::map<std::string, int>& counts) {
    std::ostringstream out;
    out << "student_id,exercise_id,score\n";
    for (const auto& [sid, n] : counts) {
        for (int j = 0; j < n; ++j) out << sid << ",e" << j << ',' << (j % 2) << '\n';
    }
    return out.str();
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::contract;
}

std::string message_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.what();
    }
    return {};
}

}  // namespace

TEST_CASE("load_logs filters students below the log threshold") {
    TempDir dir;
    const auto q = dir.write("q.csv", q_text(20, 3));
    const auto logs = dir.write("logs.csv", logs_text({{"alice", 14}, {"bob", 15}, {"carol", 20}}));
    const Dataset data = load_logs(logs, q);
    CHECK(data.n_students == 2);
    CHECK(data.student_ids == std::vector<std::string>{"bob", "carol"});
    CHECK(data.n_exercises == 20);
    CHECK(data.n_concepts == 3);
    CHECK(data.logs.size() == 35);
    CHECK_FALSE(data.is_split);
    for (const auto& t : data.logs) {
        CHECK(t.student >= 0);
        CHECK(t.student < 2);
    }
}

TEST_CASE("load_logs keeps the last of duplicate responses") {
    TempDir dir;
    const auto q = dir.write("q.csv", q_text(3, 2));
    const auto logs = dir.write("logs.csv",
                                "student_id,exercise_id,score\n"
                                "s,e0,0\ns,e1,1\ns,e0,1\ns,e2,0\n");
    const Dataset data = load_logs(logs, q, 1);
    REQUIRE(data.logs.size() == 3);
    CHECK(data.logs[0] == ResponseTriplet{0, 0, 1});
    CHECK(data.logs[1] == ResponseTriplet{0, 1, 1});
    CHECK(data.logs[2] == ResponseTriplet{0, 2, 0});

    // Three distinct responses are not enough once duplicates collapse.
    CHECK(load_logs(logs, q, 4).n_students == 0);
}

TEST_CASE("load_logs error reporting") {
    TempDir dir;
    const auto q = dir.write("q.csv", q_text(3, 2));

    SUBCASE("bad line is named") {
        const auto logs = dir.write("logs.csv", "student_id,exercise_id,score\ns,e0,1\ns,e1,x\n");
        CHECK(kind_of([&] { load_logs(logs, q, 1); }) == ErrorKind::parse);
        CHECK(message_of([&] { load_logs(logs, q, 1); }).find("logs.csv:3") != std::string::npos);
    }
    SUBCASE("wrong field count") {
        const auto logs = dir.write("logs.csv", "student_id,exercise_id,score\ns,e0\n");
        CHECK(message_of([&] { load_logs(logs, q, 1); }).find(":2:") != std::string::npos);
    }
    SUBCASE("bad header") {
        const auto logs = dir.write("logs.csv", "sid,eid,r\ns,e0,1\n");
        CHECK(kind_of([&] { load_logs(logs, q, 1); }) == ErrorKind::parse);
    }
    SUBCASE("exercise missing from the Q-matrix") {
        const auto logs = dir.write("logs.csv", "student_id,exercise_id,score\ns,e9,1\n");
        CHECK(kind_of([&] { load_logs(logs, q, 1); }) == ErrorKind::integrity);
    }
    SUBCASE("empty Q row") {
        const auto bad_q = dir.write("bad_q.csv", "exercise_id,c_0,c_1\ne0,1,0\ne1,0,0\n");
        const auto logs = dir.write("logs.csv", "student_id,exercise_id,score\ns,e0,1\n");
        CHECK(kind_of([&] { load_logs(logs, bad_q, 1); }) == ErrorKind::integrity);
        CHECK(message_of([&] { load_logs(logs, bad_q, 1); }).find("e1") != std::string::npos);
    }
    SUBCASE("duplicate Q row") {
        const auto bad_q = dir.write("bad_q.csv", "exercise_id,c_0\ne0,1\ne0,1\n");
        const auto logs = dir.write("logs.csv", "student_id,exercise_id,score\ns,e0,1\n");
        CHECK(kind_of([&] { load_logs(logs, bad_q, 1); }) == ErrorKind::integrity);
    }
    SUBCASE("missing file names the path") {
        const auto logs = dir.write("logs.csv", "student_id,exercise_id,score\n");
        CHECK(kind_of([&] { load_logs(logs, dir / "nope.csv"); }) == ErrorKind::io);
        CHECK(message_of([&] { load_logs(logs, dir / "nope.csv"); }).find("nope.csv") != std::string::npos);
    }
}

TEST_CASE("split sizes round half up per student") {
    TempDir dir;
    const auto q = dir.write("q.csv", q_text(20, 3));
    const auto logs = dir.write("logs.csv", logs_text({{"a", 10}, {"b", 15}, {"c", 20}}));
    const Dataset data = split(load_logs(logs, q, 10), 0.7, 42);
    CHECK(data.is_split);
    REQUIRE(data.provenance.split_seed.has_value());
    CHECK(*data.provenance.split_seed == 42);

    std::map<Index, std::pair<int, int>> counts;
    for (const auto& t : data.train) ++counts[t.student].first;
    for (const auto& t : data.test) ++counts[t.student].second;
    CHECK(counts[0] == std::make_pair(7, 3));
    CHECK(counts[1] == std::make_pair(11, 4));
    CHECK(counts[2] == std::make_pair(14, 6));

    // Disjoint, and together they are exactly the logs.
    std::multiset<std::pair<Index, Index>> all;
    for (const auto& t : data.logs) all.insert({t.student, t.exercise});
    std::multiset<std::pair<Index, Index>> parts;
    for (const auto& t : data.train) parts.insert({t.student, t.exercise});
    for (const auto& t : data.test) parts.insert({t.student, t.exercise});
    CHECK(all == parts);
    CHECK(parts.size() == std::set<std::pair<Index, Index>>(parts.begin(), parts.end()).size());
}

TEST_CASE("split is deterministic and rejects split input") {
    TempDir dir;
    const auto q = dir.write("q.csv", q_text(20, 3));
    const auto logs = dir.write("logs.csv", logs_text({{"a", 20}, {"b", 17}}));
    const Dataset raw = load_logs(logs, q);
    const Dataset first = split(raw, 0.7, 5);
    const Dataset second = split(raw, 0.7, 5);
    CHECK(first.train == second.train);
    CHECK(first.test == second.test);
    CHECK(split(raw, 0.7, 6).train != first.train);
    CHECK(kind_of([&] { split(first, 0.7, 5); }) == ErrorKind::contract);
    CHECK(kind_of([&] { split(raw, 1.0, 5); }) == ErrorKind::config);
}

TEST_CASE("make_batches") {
    const auto b = make_batches(300, 128, 1);
    REQUIRE(b.size() == 3);
    CHECK(b[0].size() == 128);
    CHECK(b[1].size() == 128);
    CHECK(b[2].size() == 44);
    std::vector<Index> flat;
    for (const auto& block : b) flat.insert(flat.end(), block.begin(), block.end());
    std::sort(flat.begin(), flat.end());
    for (Index i = 0; i < 300; ++i) CHECK(flat[static_cast<std::size_t>(i)] == i);

    CHECK(make_batches(300, 1, 1).size() == 300);
    CHECK(make_batches(300, 128, 1) == b);
    CHECK(make_batches(300, 128, 2) != b);
    CHECK(make_batches(0, 4, 1).empty());
    CHECK(kind_of([] { make_batches(3, 0, 1); }) == ErrorKind::contract);
}

TEST_CASE("save and load round trip") {
    SynthSpec spec;
    spec.n_students = 40;
    spec.n_exercises = 25;
    spec.response_rate = 0.8;
    const Dataset raw = synth_dina(spec).data;

    for (const bool do_split : {false, true}) {
        CAPTURE(do_split);
        const Dataset data = do_split ? split(raw, 0.7, 3) : raw;
        TempDir dir;
        save_dataset(data, dir.path());
        const Dataset back = load_dataset(dir.path());
        CHECK(back.n_students == data.n_students);
        CHECK(back.n_exercises == data.n_exercises);
        CHECK(back.n_concepts == data.n_concepts);
        CHECK(back.q == data.q);
        CHECK(back.is_split == data.is_split);
        CHECK(back.train == data.train);
        CHECK(back.test == data.test);
        CHECK(back.student_ids == data.student_ids);
        CHECK(back.exercise_ids == data.exercise_ids);
        CHECK(back.provenance.split_seed == data.provenance.split_seed);
        if (!do_split) CHECK(back.logs == data.logs);
    }
}

TEST_CASE("written files parse back through load_logs") {
    SynthSpec spec;
    const Dataset data = synth_dina(spec).data;
    TempDir dir;
    write_logs_csv(dir / "logs.csv", data, data.logs);
    write_q_csv(dir / "q.csv", data);
    const Dataset back = load_logs(dir / "logs.csv", dir / "q.csv");
    CHECK(back.logs == data.logs);
    CHECK(back.q == data.q);
}

TEST_CASE("synth_dina degenerate parameters") {
    SynthSpec spec;
    spec.n_students = 50;
    spec.n_exercises = 12;
    spec.n_concepts = 4;

    SUBCASE("no guess, no slip, full mastery") {
        spec.guess_min = spec.guess_max = 0.0;
        spec.slip_min = spec.slip_max = 0.0;
        spec.prevalence.assign(4, 1.0);
        const auto r = synth_dina(spec);
        CHECK(r.mastery.minCoeff() == 1.0);
        for (const auto& t : r.data.logs) CHECK(t.score == 1);
        CHECK_FALSE(spec.identifiable());
    }
    SUBCASE("certain guess") {
        spec.guess_min = spec.guess_max = 1.0;
        spec.slip_min = spec.slip_max = 0.0;
        const auto r = synth_dina(spec);
        CHECK(r.mastery.minCoeff() == 0.0);
        for (const auto& t : r.data.logs) CHECK(t.score == 1);
    }
}

TEST_CASE("synth_dina structure and validation") {
    SynthSpec spec;
    CHECK(spec.identifiable());
    const auto r = synth_dina(spec);
    CHECK(r.data.n_students == 300);
    CHECK(r.data.logs.size() == 300u * 30u);
    for (Index j = 0; j < r.data.n_exercises; ++j) CHECK(r.data.q.row(j).sum() >= 1.0);
    for (Index c = 0; c < r.data.n_concepts; ++c) CHECK(r.data.q.col(c).sum() >= 1.0);
    for (double g : r.guess) {
        CHECK(g >= 0.05);
        CHECK(g <= 0.25);
    }

    const auto again = synth_dina(spec);
    CHECK(again.data.logs == r.data.logs);
    CHECK(again.mastery == r.mastery);

    SynthSpec bad = spec;
    bad.n_students = 0;
    CHECK(kind_of([&] { synth_dina(bad); }) == ErrorKind::config);
    bad = spec;
    bad.guess_min = 0.4;
    bad.guess_max = 0.2;
    CHECK(kind_of([&] { synth_dina(bad); }) == ErrorKind::config);
    bad = spec;
    bad.prevalence = {0.5};
    CHECK(kind_of([&] { synth_dina(bad); }) == ErrorKind::config);
}

TEST_CASE("synth_dina correct rate of full-mastery pairs matches 1 - slip") {
    SynthSpec spec;  // N=300, M=30, K=5, seed 7
    const auto r = synth_dina(spec);
    double correct = 0.0;
    double expected = 0.0;
    int pairs = 0;
    for (const auto& t : r.data.logs) {
        bool knows_all = true;
        for (Index c = 0; c < r.data.n_concepts; ++c) {
            if (r.data.q(t.exercise, c) != 0.0 && r.mastery(t.student, c) == 0.0) knows_all = false;
        }
        if (!knows_all) continue;
        ++pairs;
        correct += t.score;
        expected += 1.0 - r.slip[static_cast<std::size_t>(t.exercise)];
    }
    REQUIRE(pairs > 500);
    CHECK(std::abs(correct / pairs - expected / pairs) <= 0.03);
}
