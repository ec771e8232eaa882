#include "doctest.h"

#include <stdexcept>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "exitlab/cli.hpp"
#include "exitlab/metrics.hpp"

using namespace exitlab;

namespace {

std::filesystem::path tmp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return text;
}

// A minimal transcript assembled by hand for metric-formula checks.
Transcript hand_transcript() {
    Transcript t;
    t.model = ModelConfig{8, 64, 256, 0};
    t.technique = "never";
    t.final_clock = 0.5;
    return t;
}

}  // namespace

TEST_CASE("gen_workload determinism, ranges, emptiness") {
    GenParams p;
    p.n_requests = 12;
    p.mean_interarrival = 0.05;
    p.prompt_len_min = 2;
    p.prompt_len_max = 6;
    p.output_len_min = 3;
    p.output_len_max = 9;
    p.seed = 77;
    const Workload a = gen_workload(p);
    const Workload b = gen_workload(p);
    REQUIRE(a.requests.size() == 12);
    for (size_t i = 0; i < a.requests.size(); ++i) {
        CHECK(a.requests[i].arrival_time == b.requests[i].arrival_time);
        CHECK(a.requests[i].prompt == b.requests[i].prompt);
        CHECK(a.requests[i].max_new_tokens == b.requests[i].max_new_tokens);
    }
    double prev_arrival = 0.0;
    for (const Request& r : a.requests) {
        CHECK(r.arrival_time >= prev_arrival);
        prev_arrival = r.arrival_time;
        CHECK(r.prompt.size() >= 2);
        CHECK(r.prompt.size() <= 6);
        CHECK(r.max_new_tokens >= 3);
        CHECK(r.max_new_tokens <= 9);
        for (int id : r.prompt) {
            CHECK(id != 0);  // EOS excluded
            CHECK(id > 0);
            CHECK(id < 256);
        }
    }

    p.n_requests = 0;
    CHECK(gen_workload(p).requests.empty());

    p.n_requests = 2;
    p.prompt_len_min = 5;
    p.prompt_len_max = 4;
    CHECK_THROWS_AS(gen_workload(p), std::invalid_argument);
}

TEST_CASE("csv trace loads, validates, and names bad lines") {
    const auto path = tmp_file("exitlab_trace.csv");
    write_file(path, "arrival_time,prompt_len,max_new_tokens\n"
                     "0.0,4,8\n"
                     "0.5,2,3\n"
                     "1.5,1,1\n");
    const Workload w = load_trace(path.string(), 256);
    REQUIRE(w.requests.size() == 3);
    CHECK(w.requests[0].prompt.size() == 4);
    CHECK(w.requests[2].arrival_time == doctest::Approx(1.5));
    // Row-index seeding is stable across loads.
    const Workload w2 = load_trace(path.string(), 256);
    CHECK(w.requests[1].prompt == w2.requests[1].prompt);

    write_file(path, "arrival_time,prompt_len,max_new_tokens\n0.0,4,8\n-1.0,2,3\n");
    try {
        load_trace(path.string(), 256);
        FAIL("expected an error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }

    write_file(path, "arrival_time,prompt_len,max_new_tokens\n");
    CHECK(load_trace(path.string(), 256).requests.empty());

    write_file(path, "bogus,header\n");
    CHECK_THROWS_AS(load_trace(path.string(), 256), std::invalid_argument);

    write_file(path, "arrival_time,prompt_len,max_new_tokens\n0.0,abc,8\n");
    CHECK_THROWS_AS(load_trace(path.string(), 256), std::invalid_argument);
    std::remove(path.string().c_str());
}

TEST_CASE("json trace loads explicit prompts") {
    const auto path = tmp_file("exitlab_trace.json");
    write_file(path, R"([
      {"arrival_time": 0.25, "prompt": [3, 1, 4], "max_new_tokens": 5},
      {"arrival_time": 0.0, "prompt": [2], "max_new_tokens": 2}
    ])");
    const Workload w = load_trace(path.string(), 256);
    REQUIRE(w.requests.size() == 2);
    CHECK(w.requests[0].arrival_time == 0.0);  // sorted by arrival
    CHECK(w.requests[1].prompt == std::vector<int>{3, 1, 4});

    write_file(path, R"([{"arrival_time": 0.0, "prompt": [999], "max_new_tokens": 1}])");
    CHECK_THROWS_AS(load_trace(path.string(), 256), std::invalid_argument);
    std::remove(path.string().c_str());
}

TEST_CASE("compute_metrics reproduces the formulas on hand transcripts") {
    Transcript t = hand_transcript();

    // Two sequences, finish - first_token = 1.0 s each, 10 tokens total.
    SequenceRecord s1;
    s1.id = 0;
    s1.arrival_time = 0.0;
    s1.first_token_time = 1.0;
    s1.finish_time = 2.0;
    s1.tokens.assign(6, 1);
    s1.exit_layers.assign(6, 8);
    s1.iter_output_layers.assign(6, 8);
    SequenceRecord s2 = s1;
    s2.id = 1;
    s2.first_token_time = 0.5;
    s2.finish_time = 1.5;
    s2.tokens.assign(4, 2);
    s2.exit_layers.assign(4, 8);
    s2.iter_output_layers.assign(4, 8);
    t.sequences = {s1, s2};

    // Four single-token iterations with exit layers [3, 8, 2, 8].
    for (int layer : {3, 8, 2, 8}) {
        IterationRecord it;
        it.output_layer = layer;
        it.per_seq.push_back({0, layer, 1});
        t.iterations.push_back(it);
    }
    // Pad with six more full-depth iterations so token counts line up.
    for (int i = 0; i < 6; ++i) {
        IterationRecord it;
        it.output_layer = 8;
        it.per_seq.push_back({1, 8, 2});
        t.iterations.push_back(it);
    }

    const MetricsReport m = compute_metrics(t);
    CHECK(m.total_tokens == 10);
    CHECK(m.inner_token_latency == doctest::Approx(0.2));       // (1.0 + 1.0) / 10
    CHECK(m.throughput == doctest::Approx(20.0));               // 10 tokens / 0.5 s
    CHECK(m.early_exit_rate_pct == doctest::Approx(20.0));      // 2 of 10 tokens early
    CHECK(m.exit_layer_histogram[2] == 1);
    CHECK(m.exit_layer_histogram[1] == 1);
    CHECK(m.exit_layer_histogram[7] == 8);

    // Rate recomputed from the histogram matches the reported rate.
    int64_t early = 0, total = 0;
    for (int layer = 1; layer <= m.n_layers; ++layer) {
        const int64_t n = m.exit_layer_histogram[static_cast<size_t>(layer - 1)];
        total += n;
        if (layer < m.n_layers) early += n;
    }
    CHECK(100.0 * static_cast<double>(early) / static_cast<double>(total) ==
          doctest::Approx(m.early_exit_rate_pct));
}

TEST_CASE("compute_metrics: 100 tokens in 0.5 s is 200 tokens/s") {
    Transcript t = hand_transcript();
    SequenceRecord s;
    s.id = 0;
    s.first_token_time = 0.1;
    s.finish_time = 0.5;
    s.tokens.assign(100, 3);
    s.exit_layers.assign(100, 8);
    s.iter_output_layers.assign(100, 8);
    t.sequences = {s};
    for (int i = 0; i < 100; ++i) {
        IterationRecord it;
        it.output_layer = 8;
        it.per_seq.push_back({0, 8, 3});
        t.iterations.push_back(it);
    }
    CHECK(compute_metrics(t).throughput == doctest::Approx(200.0));
}

TEST_CASE("compute_metrics rejects unfinished sequences") {
    Transcript t = hand_transcript();
    SequenceRecord s;
    s.id = 0;
    s.first_token_time = 0.1;
    s.finish_time = -1.0;
    s.tokens.assign(2, 1);
    s.exit_layers.assign(2, 8);
    s.iter_output_layers.assign(2, 8);
    t.sequences = {s};
    CHECK_THROWS_AS(compute_metrics(t), std::invalid_argument);
}

TEST_CASE("reports round-trip in both formats") {
    EngineConfig config;
    config.model = ModelConfig{3, 8, 16, 5};
    config.technique = ExitTechnique::state_similarity();
    config.schedule = ThresholdSchedule{0.9, 1.0, 0.0};
    Workload w;
    w.requests.push_back({0.0, {1, 2}, 5});
    w.requests.push_back({0.1, {7}, 3});
    const RunResult result = run_engine(w, config);

    for (const std::string format : {"json", "csv"}) {
        const auto path = tmp_file("exitlab_report." + format);
        write_report(result.metrics, path.string(), format);
        const MetricsReport back = read_report(path.string(), format);
        CHECK(back.throughput == result.metrics.throughput);
        CHECK(back.inner_token_latency == result.metrics.inner_token_latency);
        CHECK(back.early_exit_rate_pct == result.metrics.early_exit_rate_pct);
        CHECK(back.exit_layer_histogram == result.metrics.exit_layer_histogram);
        CHECK(back.accept_layer_histogram == result.metrics.accept_layer_histogram);
        CHECK(back.total_tokens == result.metrics.total_tokens);
        CHECK(back.total_sim_time == result.metrics.total_sim_time);
        CHECK(back.cache.pool_blocks == result.metrics.cache.pool_blocks);
        std::remove(path.string().c_str());
    }
    CHECK_THROWS_AS(write_report(result.metrics, tmp_file("x.xml").string(), "xml"),
                    std::invalid_argument);
}

TEST_CASE("csv report has one metrics section plus histogram rows") {
    EngineConfig config;
    config.model = ModelConfig{3, 8, 16, 5};
    Workload w;
    w.requests.push_back({0.0, {1}, 2});
    const RunResult result = run_engine(w, config);
    const auto path = tmp_file("exitlab_report_shape.csv");
    write_report(result.metrics, path.string(), "csv");
    const std::string text = slurp(path);
    CHECK(text.find("metric,value") == 0);
    CHECK(text.find("exit_layer_1,") != std::string::npos);
    CHECK(text.find("exit_layer_3,") != std::string::npos);
    CHECK(text.find("accept_layer_3,") != std::string::npos);
    std::remove(path.string().c_str());
}

TEST_CASE("identical runs give byte-identical reports modulo the wall clock") {
    EngineConfig config;
    config.model = ModelConfig{3, 8, 16, 5};
    config.technique = ExitTechnique::softmax_response();
    config.schedule = ThresholdSchedule{0.2, 1.0, 0.0};
    Workload w;
    w.requests.push_back({0.0, {1, 2, 3}, 6});

    auto canonical = [&](const std::filesystem::path& path) {
        RunResult result = run_engine(w, config);
        result.metrics.wall_clock_info_s = 0.0;  // explicitly-labeled info field
        write_report(result.metrics, path.string(), "json");
        return slurp(path);
    };
    const auto p1 = tmp_file("exitlab_det1.json");
    const auto p2 = tmp_file("exitlab_det2.json");
    CHECK(canonical(p1) == canonical(p2));
    std::remove(p1.string().c_str());
    std::remove(p2.string().c_str());
}

TEST_CASE("always-at(1) throughput beats never on the same workload") {
    EngineConfig base;
    base.model = ModelConfig{4, 8, 16, 3};
    base.eos_token = -1;
    Workload w;
    w.requests.push_back({0.0, {1, 2}, 6});
    w.requests.push_back({0.0, {5}, 6});

    const CompareResult result = compare_techniques(
        w, base, {ExitTechnique::always_at(1)}, {ThresholdSchedule{0.5, 1.0, 0.0}});
    REQUIRE(result.entries.size() == 2);
    CHECK(result.entries[0].technique == "never");
    CHECK(result.entries[1].metrics.throughput >= result.entries[0].metrics.throughput);
    CHECK(result.entries[1].throughput_vs_never >= 1.0);
    CHECK(result.table().find("never") != std::string::npos);
}

TEST_CASE("estimate_exit_probs reflects forced exits") {
    EngineConfig config;
    config.model = ModelConfig{4, 8, 16, 3};
    config.technique = ExitTechnique::always_at(2);
    config.eos_token = -1;
    Workload w;
    w.requests.push_back({0.0, {1}, 8});
    const RunResult result = run_engine(w, config);
    const std::vector<double> probs = estimate_exit_probs(result.transcript);
    REQUIRE(probs.size() == 4);
    CHECK(probs[0] == 0.0);  // never accepts at layer 1
    CHECK(probs[1] == 1.0);  // always accepts at layer 2
}

TEST_CASE("cli: no arguments fails with usage text") {
    CHECK(run_cli({}) != 0);
    CHECK(run_cli({"bogus-subcommand"}) != 0);
    CHECK(run_cli({"run", "--unknown-flag"}) != 0);
}

TEST_CASE("cli run writes a report and a transcript") {
    const auto report = tmp_file("exitlab_cli_report.json");
    const auto transcript = tmp_file("exitlab_cli_transcript.jsonl");
    const int rc = run_cli({"run", "--technique", "state", "--lambda0", "0.95", "--layers", "3",
                            "--d-model", "8", "--vocab", "16", "--gen-requests", "3",
                            "--output-len-max", "4", "--report", report.string(), "--transcript",
                            transcript.string()});
    CHECK(rc == 0);
    const MetricsReport m = read_report(report.string(), "json");
    CHECK(m.total_tokens > 0);
    const Transcript t = read_transcript_jsonl(transcript.string());
    CHECK(t.technique == "state");
    std::remove(report.string().c_str());
    std::remove(transcript.string().c_str());
}

TEST_CASE("cli compare emits ratios against never") {
    const auto report = tmp_file("exitlab_cli_compare.json");
    const int rc = run_cli({"compare", "--layers", "3", "--d-model", "8", "--vocab", "16",
                            "--gen-requests", "2", "--output-len-max", "4", "--techniques",
                            "always-at=1,state:0.9", "--report", report.string()});
    CHECK(rc == 0);
    const std::string text = slurp(report);
    CHECK(text.find("throughput_vs_never") != std::string::npos);
    CHECK(text.find("always-at=1") != std::string::npos);
    std::remove(report.string().c_str());
}

TEST_CASE("cli sched-eval with oracle check") {
    const auto report = tmp_file("exitlab_cli_sched.json");
    const int rc = run_cli({"sched-eval", "--policy", "q_table", "--sched-layers", "3",
                            "--population", "2", "--exit-prob", "0.5", "--train-episodes", "200",
                            "--episodes", "200", "--horizon", "50", "--oracle-check", "--out",
                            report.string()});
    CHECK(rc == 0);
    const std::string text = slurp(report);
    CHECK(text.find("oracle_max_abs_q_error") != std::string::npos);
    std::remove(report.string().c_str());
}

TEST_CASE("cli oracle reference-decode prints tokens") {
    CHECK(run_cli({"oracle", "--mode", "reference-decode", "--layers", "3", "--d-model", "8",
                   "--vocab", "16", "--prompt", "1,2", "--max-new", "4"}) == 0);
    CHECK(run_cli({"oracle", "--mode", "nonsense"}) != 0);
}
