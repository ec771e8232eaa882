#include "doctest.h"

#include <stdexcept>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "exitlab/model.hpp"

using namespace exitlab;

namespace {

ModelConfig small_config() { return ModelConfig{3, 8, 16, 7}; }

double max_abs_diff(const Vector& a, const Vector& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("config validation") {
    CHECK_THROWS_AS((ModelConfig{1, 8, 16, 0}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((ModelConfig{2, 1, 16, 0}.validate()), std::invalid_argument);
    CHECK_THROWS_AS((ModelConfig{2, 8, 1, 0}.validate()), std::invalid_argument);
}

TEST_CASE("embed shape, determinism and bounds") {
    const ModelWeights w = ModelWeights::seeded(small_config());
    const Vector h = embed(w, 3);
    CHECK(h.size() == 8);
    CHECK(embed(w, 3) == h);
    CHECK_THROWS_AS(embed(w, 16), std::invalid_argument);  // id == vocab_size
    CHECK_THROWS_AS(embed(w, -1), std::invalid_argument);
}

TEST_CASE("seeded weights are deterministic and seed-sensitive") {
    const ModelWeights a = ModelWeights::seeded(small_config());
    const ModelWeights b = ModelWeights::seeded(small_config());
    CHECK(a.embedding.values == b.embedding.values);
    CHECK(a.layers[1].w_up.values == b.layers[1].w_up.values);

    ModelConfig other = small_config();
    other.seed = 8;
    const ModelWeights c = ModelWeights::seeded(other);
    CHECK(a.embedding.values != c.embedding.values);
}

TEST_CASE("compute_kv_pair equals the direct projections") {
    const ModelWeights w = ModelWeights::seeded(small_config());
    const Vector h = seeded_vector(8, 99);
    for (int layer = 1; layer <= 3; ++layer) {
        const auto [k, v] = compute_kv_pair(w, layer, h);
        const Vector ek = matvec(w.layers[static_cast<size_t>(layer - 1)].w_k, h);
        const Vector ev = matvec(w.layers[static_cast<size_t>(layer - 1)].w_v, h);
        CHECK(max_abs_diff(k, ek) < 1e-12);
        CHECK(max_abs_diff(v, ev) < 1e-12);
    }
    const auto [zk, zv] = compute_kv_pair(w, 1, Vector(8, 0.0));
    for (double x : zk) CHECK(x == 0.0);
    for (double x : zv) CHECK(x == 0.0);
    CHECK_THROWS_AS(compute_kv_pair(w, 0, h), std::invalid_argument);
    CHECK_THROWS_AS(compute_kv_pair(w, 4, h), std::invalid_argument);
}

TEST_CASE("lm_head logits shape and linearity") {
    const ModelWeights w = ModelWeights::seeded(small_config());
    const Vector zero(8, 0.0);
    for (double x : lm_head_logits(w, zero)) CHECK(x == 0.0);
    CHECK(lm_head_logits(w, embed(w, 1)).size() == 16);
    CHECK_THROWS_AS(lm_head_logits(w, Vector(5, 1.0)), std::invalid_argument);
}

TEST_CASE("greedy token tie-breaks toward the lowest index") {
    CHECK(greedy_token({0.1, 0.9, 0.3}) == 1);
    CHECK(greedy_token({0.5, 0.5}) == 0);
    CHECK(greedy_token({2.0, 2.0, 2.0}) == 0);
    CHECK_THROWS_AS(greedy_token({}), std::invalid_argument);
}

TEST_CASE("layer_forward single sequence at position 0 is finite") {
    const ModelWeights w = ModelWeights::seeded(small_config());
    KvStore cache(8, 3, 32, 4);
    cache.allocate(0, 4);
    const Vector h = embed(w, 2);
    const auto out = layer_forward(w, 1, {{0, h}}, cache);
    REQUIRE(out.size() == 1);
    CHECK(out[0].size() == 8);
    for (double x : out[0]) CHECK(std::isfinite(x));
    CHECK(cache.written_len(0, 1) == 1);
}

TEST_CASE("layer_forward rejects bad layers and missing cache state") {
    const ModelWeights w = ModelWeights::seeded(small_config());
    KvStore cache(8, 3, 32, 4);
    cache.allocate(0, 4);
    const Vector h = embed(w, 2);
    CHECK_THROWS_AS(layer_forward(w, 0, {{0, h}}, cache), std::invalid_argument);
    CHECK_THROWS_AS(layer_forward(w, 4, {{0, h}}, cache), std::invalid_argument);
    CHECK_THROWS_AS(layer_forward(w, 1, {{5, h}}, cache), std::invalid_argument);  // unallocated
}

TEST_CASE("two sequences with identical histories produce identical outputs") {
    const ModelWeights w = ModelWeights::seeded(small_config());
    KvStore cache(8, 3, 32, 4);
    cache.allocate(0, 4);
    cache.allocate(1, 4);
    const Vector h = embed(w, 5);
    const auto out = layer_forward(w, 1, {{0, h}, {1, h}}, cache);
    CHECK(out[0] == out[1]);
}

TEST_CASE("batched outputs equal per-sequence recompute") {
    const ModelWeights w = ModelWeights::seeded(small_config());

    // Drive two sequences through two committed positions batched...
    KvStore batched(8, 3, 64, 4);
    batched.allocate(0, 4);
    batched.allocate(1, 4);
    std::vector<std::vector<Vector>> batched_out;
    const int prompt0[] = {1, 2};
    const int prompt1[] = {9, 4};
    for (int pos = 0; pos < 2; ++pos) {
        std::vector<std::pair<int, Vector>> batch = {{0, embed(w, prompt0[pos])},
                                                     {1, embed(w, prompt1[pos])}};
        for (int layer = 1; layer <= 3; ++layer) {
            auto next = layer_forward(w, layer, batch, batched);
            for (size_t b = 0; b < batch.size(); ++b) batch[b].second = next[b];
        }
        batched.commit(0);
        batched.commit(1);
        batched_out.push_back({batch[0].second, batch[1].second});
    }

    // ...then each sequence alone as the oracle.
    for (int seq = 0; seq < 2; ++seq) {
        KvStore solo(8, 3, 64, 4);
        solo.allocate(seq, 4);
        const int* prompt = seq == 0 ? prompt0 : prompt1;
        for (int pos = 0; pos < 2; ++pos) {
            std::vector<std::pair<int, Vector>> batch = {{seq, embed(w, prompt[pos])}};
            for (int layer = 1; layer <= 3; ++layer) {
                batch[0].second = layer_forward(w, layer, batch, solo)[0];
            }
            solo.commit(seq);
            CHECK(max_abs_diff(batch[0].second,
                               batched_out[static_cast<size_t>(pos)][static_cast<size_t>(seq)]) <
                  1e-9);
        }
    }
}

TEST_CASE("batch-order invariance") {
    const ModelWeights w = ModelWeights::seeded(small_config());
    KvStore a(8, 3, 64, 4);
    KvStore b(8, 3, 64, 4);
    for (int id = 0; id < 3; ++id) {
        a.allocate(id, 4);
        b.allocate(id, 4);
    }
    std::vector<std::pair<int, Vector>> fwd = {
        {0, embed(w, 1)}, {1, embed(w, 2)}, {2, embed(w, 3)}};
    std::vector<std::pair<int, Vector>> rev = {fwd[2], fwd[0], fwd[1]};
    const auto out_fwd = layer_forward(w, 1, fwd, a);
    const auto out_rev = layer_forward(w, 1, rev, b);
    CHECK(out_fwd[0] == out_rev[1]);
    CHECK(out_fwd[1] == out_rev[2]);
    CHECK(out_fwd[2] == out_rev[0]);
}

TEST_CASE("causality: earlier positions are unaffected by later appends") {
    const ModelWeights w = ModelWeights::seeded(small_config());
    const int tokens[] = {1, 2, 3, 4, 5};

    auto run_prefix = [&](int len) {
        KvStore cache(8, 3, 64, 4);
        cache.allocate(0, 8);
        std::vector<Vector> outputs;
        for (int pos = 0; pos < len; ++pos) {
            Vector h = embed(w, tokens[pos]);
            for (int layer = 1; layer <= 3; ++layer) {
                h = layer_forward(w, layer, {{0, h}}, cache)[0];
            }
            cache.commit(0);
            outputs.push_back(h);
        }
        return outputs;
    };

    const auto full = run_prefix(5);
    const auto prefix = run_prefix(3);
    for (int pos = 0; pos < 3; ++pos) {
        CHECK(max_abs_diff(full[static_cast<size_t>(pos)], prefix[static_cast<size_t>(pos)]) <
              1e-12);
    }
}

TEST_CASE("weights round-trip through JSON with dimension validation") {
    const ModelWeights w = ModelWeights::seeded(small_config());
    const std::string path =
        (std::filesystem::temp_directory_path() / "exitlab_weights_test.json").string();
    w.save(path);
    const ModelWeights r = ModelWeights::load(path);
    CHECK(r.config.n_layers == w.config.n_layers);
    CHECK(r.embedding.values == w.embedding.values);
    CHECK(r.layers[2].w_down.values == w.layers[2].w_down.values);
    CHECK(r.probe.w == w.probe.w);
    CHECK(r.probe.b == w.probe.b);
    std::remove(path.c_str());

    // Corrupt a dimension.
    std::string text = w.to_json();
    const auto pos = text.find("\"d_model\":8");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 11, "\"d_model\":9");
    CHECK_THROWS(ModelWeights::from_json(text));
}
