#include "exitlab/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace exitlab {

void ModelConfig::validate() const {
    if (n_layers < 2) throw std::invalid_argument("ModelConfig: n_layers must be >= 2");
    if (d_model < 2) throw std::invalid_argument("ModelConfig: d_model must be >= 2");
    if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
}

namespace {

// Per-tensor seed derivation: a fixed tag per tensor keeps the scheme stable
// when weights are regenerated or cross-checked from a saved file.
//   0 embedding, 1 lm_head, 2 probe.w, 3 probe.b,
//   layer i (1-based): 4 + (i-1)*6 + {0 q, 1 k, 2 v, 3 o, 4 up, 5 down}
uint64_t tensor_seed(uint64_t model_seed, uint64_t tag) {
    return splitmix64_at(model_seed, tag);
}

constexpr uint64_t kTagEmbedding = 0;
constexpr uint64_t kTagLmHead = 1;
constexpr uint64_t kTagProbeW = 2;
constexpr uint64_t kTagProbeB = 3;
constexpr uint64_t kTagLayerBase = 4;
constexpr uint64_t kTagsPerLayer = 6;

}  // namespace

ModelWeights ModelWeights::seeded(const ModelConfig& config) {
    config.validate();
    const int d = config.d_model;
    ModelWeights w;
    w.config = config;
    w.embedding = seeded_matrix(config.vocab_size, d, tensor_seed(config.seed, kTagEmbedding));
    w.lm_head = seeded_matrix(config.vocab_size, d, tensor_seed(config.seed, kTagLmHead));
    w.probe.w = seeded_vector(d, tensor_seed(config.seed, kTagProbeW));
    w.probe.b = 2.0 * uniform01_at(tensor_seed(config.seed, kTagProbeB), 0) - 1.0;
    w.layers.reserve(static_cast<size_t>(config.n_layers));
    for (int i = 0; i < config.n_layers; ++i) {
        const uint64_t base = kTagLayerBase + static_cast<uint64_t>(i) * kTagsPerLayer;
        LayerWeights lw;
        lw.w_q = seeded_matrix(d, d, tensor_seed(config.seed, base + 0));
        lw.w_k = seeded_matrix(d, d, tensor_seed(config.seed, base + 1));
        lw.w_v = seeded_matrix(d, d, tensor_seed(config.seed, base + 2));
        lw.w_o = seeded_matrix(d, d, tensor_seed(config.seed, base + 3));
        lw.w_up = seeded_matrix(4 * d, d, tensor_seed(config.seed, base + 4));
        lw.w_down = seeded_matrix(d, 4 * d, tensor_seed(config.seed, base + 5));
        w.layers.push_back(std::move(lw));
    }
    return w;
}

namespace {

nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < m.rows; ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < m.cols; ++c) {
            row.push_back(m.at(r, c));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

Matrix matrix_from_json(const nlohmann::json& j, int rows, int cols, const std::string& name) {
    if (!j.is_array() || static_cast<int>(j.size()) != rows) {
        throw std::invalid_argument("weights: " + name + " must have " + std::to_string(rows) +
                                    " rows");
    }
    Matrix m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        const auto& row = j[static_cast<size_t>(r)];
        if (!row.is_array() || static_cast<int>(row.size()) != cols) {
            throw std::invalid_argument("weights: " + name + " row " + std::to_string(r) +
                                        " must have " + std::to_string(cols) + " columns");
        }
        for (int c = 0; c < cols; ++c) {
            m.at(r, c) = row[static_cast<size_t>(c)].get<double>();
        }
    }
    return m;
}

}  // namespace

std::string ModelWeights::to_json() const {
    nlohmann::ordered_json j;
    j["config"] = {{"n_layers", config.n_layers},
                   {"d_model", config.d_model},
                   {"vocab_size", config.vocab_size},
                   {"seed", config.seed}};
    j["embedding"] = matrix_to_json(embedding);
    j["lm_head"] = matrix_to_json(lm_head);
    j["probe_w"] = probe.w;
    j["probe_b"] = probe.b;
    nlohmann::ordered_json jl = nlohmann::ordered_json::array();
    for (const LayerWeights& lw : layers) {
        nlohmann::ordered_json one;
        one["w_q"] = matrix_to_json(lw.w_q);
        one["w_k"] = matrix_to_json(lw.w_k);
        one["w_v"] = matrix_to_json(lw.w_v);
        one["w_o"] = matrix_to_json(lw.w_o);
        one["w_up"] = matrix_to_json(lw.w_up);
        one["w_down"] = matrix_to_json(lw.w_down);
        jl.push_back(std::move(one));
    }
    j["layers"] = std::move(jl);
    return j.dump();
}

ModelWeights ModelWeights::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    ModelWeights w;
    w.config.n_layers = j.at("config").at("n_layers").get<int>();
    w.config.d_model = j.at("config").at("d_model").get<int>();
    w.config.vocab_size = j.at("config").at("vocab_size").get<int>();
    w.config.seed = j.at("config").at("seed").get<uint64_t>();
    w.config.validate();
    const int d = w.config.d_model;
    w.embedding = matrix_from_json(j.at("embedding"), w.config.vocab_size, d, "embedding");
    w.lm_head = matrix_from_json(j.at("lm_head"), w.config.vocab_size, d, "lm_head");
    w.probe.w = j.at("probe_w").get<Vector>();
    if (w.probe.w.size() != static_cast<size_t>(d)) {
        throw std::invalid_argument("weights: probe_w must have length d_model");
    }
    w.probe.b = j.at("probe_b").get<double>();
    const auto& jl = j.at("layers");
    if (static_cast<int>(jl.size()) != w.config.n_layers) {
        throw std::invalid_argument("weights: layer count does not match config.n_layers");
    }
    for (int i = 0; i < w.config.n_layers; ++i) {
        const auto& one = jl[static_cast<size_t>(i)];
        const std::string tag = "layer " + std::to_string(i + 1) + " ";
        LayerWeights lw;
        lw.w_q = matrix_from_json(one.at("w_q"), d, d, tag + "w_q");
        lw.w_k = matrix_from_json(one.at("w_k"), d, d, tag + "w_k");
        lw.w_v = matrix_from_json(one.at("w_v"), d, d, tag + "w_v");
        lw.w_o = matrix_from_json(one.at("w_o"), d, d, tag + "w_o");
        lw.w_up = matrix_from_json(one.at("w_up"), 4 * d, d, tag + "w_up");
        lw.w_down = matrix_from_json(one.at("w_down"), d, 4 * d, tag + "w_down");
        w.layers.push_back(std::move(lw));
    }
    return w;
}

void ModelWeights::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("weights: cannot open " + path + " for writing");
    out << to_json();
    if (!out) throw std::runtime_error("weights: write failed for " + path);
}

ModelWeights ModelWeights::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("weights: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

Vector embed(const ModelWeights& weights, int token_id) {
    if (token_id < 0 || token_id >= weights.config.vocab_size) {
        throw std::invalid_argument("embed: token id " + std::to_string(token_id) +
                                    " outside [0, " + std::to_string(weights.config.vocab_size) +
                                    ")");
    }
    const int d = weights.config.d_model;
    Vector h(static_cast<size_t>(d));
    for (int c = 0; c < d; ++c) {
        h[static_cast<size_t>(c)] = weights.embedding.at(token_id, c);
    }
    return h;
}

namespace {

double span_dot(std::span<const double> a, const Vector& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

}  // namespace

std::vector<Vector> layer_forward(const ModelWeights& weights, int layer,
                                  const std::vector<std::pair<int, Vector>>& batch,
                                  KvStore& cache) {
    if (layer < 1 || layer > weights.config.n_layers) {
        throw std::invalid_argument("layer_forward: layer " + std::to_string(layer) +
                                    " outside [1, " + std::to_string(weights.config.n_layers) +
                                    "]");
    }
    const LayerWeights& lw = weights.layers[static_cast<size_t>(layer - 1)];
    const int d = weights.config.d_model;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    // Flattened-batch projections, then per-sequence attention.
    std::vector<Vector> inputs;
    inputs.reserve(batch.size());
    for (const auto& [seq_id, h] : batch) {
        if (h.size() != static_cast<size_t>(d)) {
            throw std::invalid_argument("layer_forward: hidden state length mismatch");
        }
        inputs.push_back(h);
    }
    const std::vector<Vector> qs = matvec_batch(lw.w_q, inputs);
    const std::vector<Vector> ks = matvec_batch(lw.w_k, inputs);
    const std::vector<Vector> vs = matvec_batch(lw.w_v, inputs);

    std::vector<Vector> attended(batch.size());
    for (size_t b = 0; b < batch.size(); ++b) {
        const int seq_id = batch[b].first;
        const int position = cache.committed_len(seq_id);
        cache.append(seq_id, layer, position, ks[b], vs[b]);

        const KvView kv = cache.view(seq_id, layer, position + 1);
        Vector scores(static_cast<size_t>(kv.size()));
        for (int p = 0; p < kv.size(); ++p) {
            scores[static_cast<size_t>(p)] = span_dot(kv.key(p), qs[b]) * scale;
        }
        const Vector probs = softmax(scores);
        Vector out(static_cast<size_t>(d), 0.0);
        for (int p = 0; p < kv.size(); ++p) {
            const std::span<const double> v = kv.value(p);
            const double weight = probs[static_cast<size_t>(p)];
            for (int i = 0; i < d; ++i) {
                out[static_cast<size_t>(i)] += weight * v[static_cast<size_t>(i)];
            }
        }
        attended[b] = std::move(out);
    }

    const std::vector<Vector> projected = matvec_batch(lw.w_o, attended);
    std::vector<Vector> mid(batch.size());
    for (size_t b = 0; b < batch.size(); ++b) {
        mid[b].resize(static_cast<size_t>(d));
        for (int i = 0; i < d; ++i) {
            mid[b][static_cast<size_t>(i)] =
                inputs[b][static_cast<size_t>(i)] + projected[b][static_cast<size_t>(i)];
        }
    }

    std::vector<Vector> up = matvec_batch(lw.w_up, mid);
    for (Vector& u : up) {
        for (double& x : u) {
            if (x < 0.0) x = 0.0;  // ReLU
        }
    }
    const std::vector<Vector> down = matvec_batch(lw.w_down, up);

    std::vector<Vector> out(batch.size());
    for (size_t b = 0; b < batch.size(); ++b) {
        out[b].resize(static_cast<size_t>(d));
        for (int i = 0; i < d; ++i) {
            out[b][static_cast<size_t>(i)] =
                mid[b][static_cast<size_t>(i)] + down[b][static_cast<size_t>(i)];
        }
    }
    return out;
}

std::pair<Vector, Vector> compute_kv_pair(const ModelWeights& weights, int layer, const Vector& h) {
    if (layer < 1 || layer > weights.config.n_layers) {
        throw std::invalid_argument("compute_kv_pair: layer " + std::to_string(layer) +
                                    " outside [1, " + std::to_string(weights.config.n_layers) +
                                    "]");
    }
    const LayerWeights& lw = weights.layers[static_cast<size_t>(layer - 1)];
    return {matvec(lw.w_k, h), matvec(lw.w_v, h)};
}

Vector lm_head_logits(const ModelWeights& weights, const Vector& h) {
    return matvec(weights.lm_head, h);
}

int greedy_token(const Vector& logits) {
    if (logits.empty()) {
        throw std::invalid_argument("greedy_token: empty logits");
    }
    int best = 0;
    for (size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[static_cast<size_t>(best)]) {
            best = static_cast<int>(i);
        }
    }
    return best;
}

}  // namespace exitlab
