#include "doctest.h"

#include <stdexcept>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "exitlab/engine.hpp"
#include "exitlab/oracle.hpp"

using namespace exitlab;

namespace {

EngineConfig tiny_config() {
    EngineConfig c;
    c.model = ModelConfig{3, 8, 16, 11};
    c.technique = ExitTechnique::never();
    c.max_batch = 4;
    c.pool_blocks = 256;
    c.block_capacity = 4;
    return c;
}

Workload single_request(std::vector<int> prompt, int max_new, double arrival = 0.0) {
    Workload w;
    w.requests.push_back({arrival, std::move(prompt), max_new});
    return w;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("status vector latches accepts and finds the common exit layer") {
    ExitStatusVector status(2);
    CHECK_FALSE(status.observe_layer(1, {false, false}));
    CHECK_FALSE(status.observe_layer(2, {true, false}));
    CHECK_FALSE(status.observe_layer(3, {false, false}));
    CHECK_FALSE(status.observe_layer(4, {false, false}));
    // Sequence 0 stays accepted through layers 3-4 even though its checks
    // failed there; the batch exits when sequence 1 accepts at layer 5.
    CHECK(status.observe_layer(5, {false, true}));
    CHECK(status.first_accept_layer(0, 8) == 2);
    CHECK(status.first_accept_layer(1, 8) == 5);
}

TEST_CASE("status vector monotonicity under random accept patterns") {
    SplitMix64 rng(555);
    for (int trial = 0; trial < 200; ++trial) {
        const int batch = 1 + static_cast<int>(rng.next() % 6);
        const int layers = 2 + static_cast<int>(rng.next() % 7);
        ExitStatusVector status(batch);
        std::vector<bool> was_set(static_cast<size_t>(batch), false);
        std::vector<int> first(static_cast<size_t>(batch), 0);
        int output_layer = layers;
        for (int layer = 1; layer <= layers; ++layer) {
            std::vector<bool> accepted(static_cast<size_t>(batch));
            for (int b = 0; b < batch; ++b) accepted[static_cast<size_t>(b)] = rng.next() % 3 == 0;
            const bool done = status.observe_layer(layer, accepted);
            for (int b = 0; b < batch; ++b) {
                if (was_set[static_cast<size_t>(b)]) {
                    CHECK(status.is_set(b));  // never un-latches
                } else if (status.is_set(b)) {
                    was_set[static_cast<size_t>(b)] = true;
                    first[static_cast<size_t>(b)] = layer;
                }
            }
            if (done) {
                output_layer = layer;
                break;
            }
        }
        int expected = 0;
        for (int b = 0; b < batch; ++b) {
            expected = std::max(expected, status.first_accept_layer(b, layers));
        }
        CHECK(output_layer == expected);
    }
}

TEST_CASE("empty workload produces an empty transcript") {
    const Engine engine(tiny_config());
    const Transcript t = engine.run(Workload{});
    CHECK(t.iterations.empty());
    CHECK(t.sequences.empty());
    CHECK(t.final_clock == 0.0);
}

TEST_CASE("never technique matches the reference decoder token for token") {
    EngineConfig config = tiny_config();
    const Engine engine(config);
    const Workload w = single_request({1, 2, 3}, 6);
    const Transcript t = engine.run(w);
    REQUIRE(t.sequences.size() == 1);
    const auto expected = reference_decode(engine.weights(), {1, 2, 3}, 6, config.eos_token);
    CHECK(t.sequences[0].tokens == expected);
    for (const IterationRecord& it : t.iterations) {
        CHECK(it.output_layer == config.model.n_layers);
    }
}

TEST_CASE("always_at(1) exits every iteration at layer 1") {
    EngineConfig config = tiny_config();
    config.technique = ExitTechnique::always_at(1);
    config.eos_token = -1;
    const Engine engine(config);
    const Transcript t = engine.run(single_request({2, 3}, 5));
    REQUIRE(t.sequences.size() == 1);
    CHECK(t.sequences[0].tokens.size() == 5);
    for (const IterationRecord& it : t.iterations) {
        CHECK(it.output_layer == 1);
        for (const IterationPerSeq& s : it.per_seq) CHECK(s.accept_layer == 1);
    }
    // Charge per iteration: one layer plus L-1 fills for a batch of one.
    const CostModel& costs = config.costs;
    const double expected =
        costs.c_layer_fixed + costs.c_layer_per_seq + 2.0 * costs.c_fill_per_seq_layer;
    for (const IterationRecord& it : t.iterations) {
        CHECK(it.charge == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("output_layer equals the max accept layer in every iteration") {
    EngineConfig config = tiny_config();
    config.technique = ExitTechnique::classifier();
    config.schedule = ThresholdSchedule{0.5, 1.0, 0.0};
    config.eos_token = -1;
    const Engine engine(config);
    Workload w;
    w.requests.push_back({0.0, {1, 2}, 8});
    w.requests.push_back({0.0, {7}, 8});
    w.requests.push_back({0.0, {3, 9, 4}, 8});
    const Transcript t = engine.run(w);
    CHECK(!t.iterations.empty());
    for (const IterationRecord& it : t.iterations) {
        int max_accept = 0;
        for (const IterationPerSeq& s : it.per_seq) {
            max_accept = std::max(max_accept, s.accept_layer);
        }
        CHECK(it.output_layer == max_accept);
    }
}

TEST_CASE("admission is FIFO and eviction frees room between iterations") {
    EngineConfig config = tiny_config();
    config.max_batch = 2;
    config.eos_token = -1;
    const Engine engine(config);
    Workload w;
    w.requests.push_back({0.0, {1}, 6});  // id 0
    w.requests.push_back({0.0, {2}, 2});  // id 1, finishes first
    w.requests.push_back({0.0, {3}, 2});  // id 2, waits for room
    const Transcript t = engine.run(w);

    auto first_iteration_with = [&](int id) {
        for (size_t i = 0; i < t.iterations.size(); ++i) {
            for (int b : t.iterations[i].batch_ids) {
                if (b == id) return static_cast<int>(i);
            }
        }
        return -1;
    };
    CHECK(first_iteration_with(0) == 0);
    CHECK(first_iteration_with(1) == 0);
    CHECK(first_iteration_with(2) == 2);  // admitted right after id 1's 2 tokens
    REQUIRE(t.sequences.size() == 3);
}

TEST_CASE("a deferred head-of-queue blocks later arrivals") {
    EngineConfig config = tiny_config();
    // Each sequence reserves ceil((prompt+max_new)/4)*3 blocks: id 0 takes 9
    // of 12, id 1 needs all 12 and defers, id 2 needs 3 and would fit but
    // must wait behind id 1.
    config.pool_blocks = 12;
    config.max_batch = 4;
    config.eos_token = -1;
    const Engine engine(config);
    Workload w;
    w.requests.push_back({0.0, {1, 2, 3, 4}, 8});   // id 0: 9 blocks
    w.requests.push_back({0.0, {5, 6, 7, 8}, 12});  // id 1: 12 blocks, deferred
    w.requests.push_back({0.0, {9}, 1});            // id 2: 3 blocks, blocked by FIFO
    const Transcript t = engine.run(w);

    auto first_iteration_with = [&](int id) {
        for (size_t i = 0; i < t.iterations.size(); ++i) {
            for (int b : t.iterations[i].batch_ids) {
                if (b == id) return static_cast<int>(i);
            }
        }
        return -1;
    };
    REQUIRE(t.sequences.size() == 3);
    CHECK(first_iteration_with(0) == 0);
    CHECK(first_iteration_with(1) > first_iteration_with(0));
    CHECK(first_iteration_with(2) > first_iteration_with(1));  // strict FIFO
}

TEST_CASE("batch composition does not change tokens under never") {
    EngineConfig config = tiny_config();
    const Engine engine(config);
    Workload together;
    together.requests.push_back({0.0, {1, 2}, 5});
    together.requests.push_back({0.0, {9, 5, 4}, 4});
    together.requests.push_back({0.0, {11}, 6});
    const Transcript batched = engine.run(together);
    REQUIRE(batched.sequences.size() == 3);

    for (const SequenceRecord& s : batched.sequences) {
        Workload alone;
        alone.requests.push_back({0.0, s.prompt, 8});
        const Transcript solo = engine.run(alone);
        REQUIRE(solo.sequences.size() == 1);
        // Compare the prefix the batched run produced (it may have stopped at
        // max_new_tokens earlier than the solo run).
        REQUIRE(solo.sequences[0].tokens.size() >= s.tokens.size());
        for (size_t i = 0; i < s.tokens.size(); ++i) {
            CHECK(solo.sequences[0].tokens[i] == s.tokens[i]);
        }
    }
}

TEST_CASE("same workload and config give byte-identical transcripts") {
    EngineConfig config = tiny_config();
    config.technique = ExitTechnique::state_similarity();
    config.schedule = ThresholdSchedule{0.9, 1.0, 0.0};
    const Engine engine(config);
    Workload w;
    w.requests.push_back({0.0, {1, 2}, 6});
    w.requests.push_back({0.05, {3}, 4});

    const auto dir = std::filesystem::temp_directory_path();
    const std::string p1 = (dir / "exitlab_t1.jsonl").string();
    const std::string p2 = (dir / "exitlab_t2.jsonl").string();
    write_transcript_jsonl(engine.run(w), p1);
    write_transcript_jsonl(engine.run(w), p2);
    CHECK(slurp(p1) == slurp(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("clock equals accumulated charges plus idle time") {
    EngineConfig config = tiny_config();
    const Engine engine(config);

    Workload all_at_zero;
    all_at_zero.requests.push_back({0.0, {1, 2}, 4});
    all_at_zero.requests.push_back({0.0, {3}, 3});
    const Transcript t0 = engine.run(all_at_zero);
    CHECK(t0.total_idle == 0.0);
    CHECK(t0.final_clock == doctest::Approx(t0.total_charge()).epsilon(1e-12));

    Workload gapped;
    gapped.requests.push_back({0.0, {1}, 2});
    gapped.requests.push_back({100.0, {2}, 2});  // long idle gap
    const Transcript t1 = engine.run(gapped);
    CHECK(t1.total_idle > 0.0);
    CHECK(t1.final_clock == doctest::Approx(t1.total_charge() + t1.total_idle).epsilon(1e-12));
}

TEST_CASE("per-sequence timing fields are consistent") {
    EngineConfig config = tiny_config();
    const Engine engine(config);
    Workload w;
    w.requests.push_back({0.0, {1, 2, 3}, 4});
    w.requests.push_back({0.01, {4}, 4});
    const Transcript t = engine.run(w);
    for (const SequenceRecord& s : t.sequences) {
        CHECK(s.first_token_time >= s.arrival_time);
        CHECK(s.finish_time >= s.first_token_time);
        CHECK(s.tokens.size() == s.exit_layers.size());
        CHECK(s.tokens.size() == s.iter_output_layers.size());
        CHECK(!s.tokens.empty());
    }
}

TEST_CASE("EOS stops a sequence early; disabling EOS ignores it") {
    EngineConfig config = tiny_config();
    config.eos_token = -1;
    const Engine engine(config);
    const Transcript free_run = engine.run(single_request({1, 2}, 12));
    REQUIRE(free_run.sequences.size() == 1);
    CHECK(free_run.sequences[0].tokens.size() == 12);

    // Same weights, EOS enabled: stop at the first 0 token if one occurs.
    EngineConfig with_eos = tiny_config();
    const Engine engine2(with_eos);
    const Transcript stopped = engine2.run(single_request({1, 2}, 12));
    const auto& tokens = stopped.sequences[0].tokens;
    for (size_t i = 0; i + 1 < tokens.size(); ++i) {
        CHECK(tokens[i] != 0);  // only the last token may be EOS
    }
}

TEST_CASE("transcript JSONL round-trips") {
    EngineConfig config = tiny_config();
    config.technique = ExitTechnique::softmax_response();
    config.schedule = ThresholdSchedule{0.1, 1.0, 0.0};
    const Engine engine(config);
    Workload w;
    w.requests.push_back({0.0, {1, 2}, 4});
    w.requests.push_back({0.2, {5}, 3});
    const Transcript t = engine.run(w);

    const auto dir = std::filesystem::temp_directory_path();
    const std::string p1 = (dir / "exitlab_rt1.jsonl").string();
    const std::string p2 = (dir / "exitlab_rt2.jsonl").string();
    write_transcript_jsonl(t, p1);
    const Transcript back = read_transcript_jsonl(p1);
    write_transcript_jsonl(back, p2);
    CHECK(slurp(p1) == slurp(p2));
    CHECK(back.iterations.size() == t.iterations.size());
    CHECK(back.sequences.size() == t.sequences.size());
    CHECK(back.final_clock == t.final_clock);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("engine config validation") {
    EngineConfig config = tiny_config();
    config.max_batch = 0;
    CHECK_THROWS_AS(Engine{config}, std::invalid_argument);

    EngineConfig bad_exit = tiny_config();
    bad_exit.technique = ExitTechnique::always_at(9);
    CHECK_THROWS_AS(Engine{bad_exit}, std::invalid_argument);

    EngineConfig bad_sched = tiny_config();
    bad_sched.schedule.gamma = 0.0;
    CHECK_THROWS_AS(Engine{bad_sched}, std::invalid_argument);
}
