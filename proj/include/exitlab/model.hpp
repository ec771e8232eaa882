#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "exitlab/kv_cache.hpp"
#include "exitlab/numerics.hpp"

namespace exitlab {

// Toy decoder-only transformer: single attention head, plain residual blocks,
// no positional encoding beyond causal order, ReLU MLP. Small enough to run
// whole batch sweeps in doubles on one core, real enough that hidden states,
// logits and per-layer K/V projections behave like the genuine article.

struct ModelConfig {
    int n_layers = 8;
    int d_model = 64;
    int vocab_size = 256;
    uint64_t seed = 0;

    void validate() const;  // n_layers >= 2, d_model >= 2, vocab_size >= 2
};

struct LayerWeights {
    Matrix w_q, w_k, w_v, w_o;  // d x d
    Matrix w_up;                // 4d x d
    Matrix w_down;              // d x 4d
};

struct ClassifierProbe {
    Vector w;       // length d_model
    double b = 0.0;
};

struct ModelWeights {
    ModelConfig config;
    Matrix embedding;  // vocab x d
    std::vector<LayerWeights> layers;
    Matrix lm_head;    // vocab x d
    ClassifierProbe probe;

    // Deterministic weights from config.seed; same (config, seed) gives
    // bitwise-identical tensors on any platform.
    static ModelWeights seeded(const ModelConfig& config);

    // Single JSON document {config, named 2-D arrays as nested lists}.
    // Loading validates every dimension against the embedded config.
    std::string to_json() const;
    static ModelWeights from_json(const std::string& text);
    void save(const std::string& path) const;
    static ModelWeights load(const std::string& path);
};

// Row token_id of the embedding matrix. Throws on out-of-range id.
Vector embed(const ModelWeights& weights, int token_id);

// One decoder layer over a batch: appends each sequence's (K, V) at its
// current position, runs causal single-head attention per sequence over that
// layer's cached entries, then residual + 2-layer MLP. Linear projections and
// the MLP run over the flattened batch; only attention is per sequence.
std::vector<Vector> layer_forward(const ModelWeights& weights, int layer,
                                  const std::vector<std::pair<int, Vector>>& batch,
                                  KvStore& cache);

// (W_k h, W_v h) for the given layer: exactly one matrix multiplication per
// projection, no attention or MLP. This is what makes skipped-layer cache
// filling cheap.
std::pair<Vector, Vector> compute_kv_pair(const ModelWeights& weights, int layer, const Vector& h);

Vector lm_head_logits(const ModelWeights& weights, const Vector& h);

// Argmax token id, ties broken toward the lowest index.
int greedy_token(const Vector& logits);

}  // namespace exitlab
