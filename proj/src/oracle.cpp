#include "exitlab/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace exitlab {

namespace {

// One decoder layer over plain per-layer K/V lists. Mirrors the block math
// of layer_forward operation for operation so token streams compare exactly,
// but does its own bookkeeping.
Vector plain_layer(const ModelWeights& weights, int layer, const Vector& h,
                   std::vector<std::vector<ReplayKvEntry>>& kv) {
    const LayerWeights& lw = weights.layers[static_cast<size_t>(layer - 1)];
    const int d = weights.config.d_model;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    const Vector q = matvec(lw.w_q, h);
    auto& entries = kv[static_cast<size_t>(layer - 1)];
    entries.push_back({matvec(lw.w_k, h), matvec(lw.w_v, h)});

    Vector scores(entries.size());
    for (size_t p = 0; p < entries.size(); ++p) {
        double acc = 0.0;
        for (int i = 0; i < d; ++i) {
            acc += entries[p].k[static_cast<size_t>(i)] * q[static_cast<size_t>(i)];
        }
        scores[p] = acc * scale;
    }
    const Vector probs = softmax(scores);
    Vector attended(static_cast<size_t>(d), 0.0);
    for (size_t p = 0; p < entries.size(); ++p) {
        for (int i = 0; i < d; ++i) {
            attended[static_cast<size_t>(i)] += probs[p] * entries[p].v[static_cast<size_t>(i)];
        }
    }

    const Vector projected = matvec(lw.w_o, attended);
    Vector mid(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
        mid[static_cast<size_t>(i)] = h[static_cast<size_t>(i)] + projected[static_cast<size_t>(i)];
    }

    Vector up = matvec(lw.w_up, mid);
    for (double& x : up) {
        if (x < 0.0) x = 0.0;
    }
    const Vector down = matvec(lw.w_down, up);
    Vector out(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) {
        out[static_cast<size_t>(i)] = mid[static_cast<size_t>(i)] + down[static_cast<size_t>(i)];
    }
    return out;
}

}  // namespace

std::vector<int> reference_decode(const ModelWeights& weights, const std::vector<int>& prompt,
                                  int max_new_tokens, int eos_token) {
    if (prompt.empty()) throw std::invalid_argument("reference_decode: empty prompt");
    if (max_new_tokens < 1) throw std::invalid_argument("reference_decode: max_new_tokens < 1");
    const int n_layers = weights.config.n_layers;

    std::vector<std::vector<ReplayKvEntry>> kv(static_cast<size_t>(n_layers));
    // Prompt positions before the last one: full passes, no token emitted.
    for (size_t j = 0; j + 1 < prompt.size(); ++j) {
        Vector h = embed(weights, prompt[j]);
        for (int layer = 1; layer <= n_layers; ++layer) {
            h = plain_layer(weights, layer, h, kv);
        }
    }

    std::vector<int> tokens;
    int input = prompt.back();
    while (static_cast<int>(tokens.size()) < max_new_tokens) {
        Vector h = embed(weights, input);
        for (int layer = 1; layer <= n_layers; ++layer) {
            h = plain_layer(weights, layer, h, kv);
        }
        const int token = greedy_token(lm_head_logits(weights, h));
        tokens.push_back(token);
        if (eos_token >= 0 && token == eos_token) break;
        input = token;
    }
    return tokens;
}

SequenceReplay replay_sequence(const ModelWeights& weights, const std::vector<int>& prompt,
                               const std::vector<int>& per_token_output_layers) {
    if (prompt.empty()) throw std::invalid_argument("replay_sequence: empty prompt");
    const int n_layers = weights.config.n_layers;
    for (int e : per_token_output_layers) {
        if (e < 1 || e > n_layers) {
            throw std::invalid_argument("replay_sequence: exit layer outside [1, n_layers]");
        }
    }

    SequenceReplay replay;
    replay.kv.resize(static_cast<size_t>(n_layers));

    for (size_t j = 0; j + 1 < prompt.size(); ++j) {
        Vector h = embed(weights, prompt[j]);
        for (int layer = 1; layer <= n_layers; ++layer) {
            h = plain_layer(weights, layer, h, replay.kv);
        }
    }

    int input = prompt.back();
    for (int exit_layer : per_token_output_layers) {
        Vector h = embed(weights, input);
        for (int layer = 1; layer <= exit_layer; ++layer) {
            h = plain_layer(weights, layer, h, replay.kv);
        }
        for (int layer = exit_layer + 1; layer <= n_layers; ++layer) {
            const LayerWeights& lw = weights.layers[static_cast<size_t>(layer - 1)];
            replay.kv[static_cast<size_t>(layer - 1)].push_back(
                {matvec(lw.w_k, h), matvec(lw.w_v, h)});
        }
        const int token = greedy_token(lm_head_logits(weights, h));
        replay.exit_states.push_back(h);
        replay.tokens.push_back(token);
        input = token;
    }
    return replay;
}

double ValueIterationResult::optimal_q(const OccupancyState& v, int action) const {
    auto it = q.find(v);
    if (it == q.end()) throw std::invalid_argument("optimal_q: state outside the computed space");
    if (action < 1 || action > static_cast<int>(it->second.size())) {
        throw std::invalid_argument("optimal_q: action out of range");
    }
    return it->second[static_cast<size_t>(action - 1)];
}

double ValueIterationResult::optimal_value(const OccupancyState& v) const {
    const auto& row = q.at(v);
    double best = row[0];
    for (double x : row) best = std::max(best, x);
    return best;
}

int ValueIterationResult::optimal_action(const OccupancyState& v) const {
    const auto& row = q.at(v);
    int best = 1;
    for (int a = 2; a <= static_cast<int>(row.size()); ++a) {
        if (row[static_cast<size_t>(a - 1)] > row[static_cast<size_t>(best - 1)]) best = a;
    }
    return best;
}

namespace {

// pmf of Binomial(count, p) expanded exactly; count is at most the
// population, so the loop is tiny.
std::vector<double> binomial_pmf(int count, double p) {
    std::vector<double> pmf(static_cast<size_t>(count) + 1, 0.0);
    double coeff = 1.0;
    for (int e = 0; e <= count; ++e) {
        pmf[static_cast<size_t>(e)] =
            coeff * std::pow(p, e) * std::pow(1.0 - p, count - e);
        coeff = coeff * (count - e) / (e + 1);
    }
    return pmf;
}

}  // namespace

ValueIterationResult value_iteration(const MdpParams& params, double tol, int max_sweeps) {
    params.validate();
    ValueIterationResult result;
    result.params = params;
    result.states = enumerate_states(params.n_layers, params.population);
    const int n_layers = params.n_layers;

    for (const OccupancyState& s : result.states) {
        result.q.emplace(s, std::vector<double>(static_cast<size_t>(n_layers), 0.0));
    }

    std::unordered_map<OccupancyState, double, OccupancyHash> value;
    for (const OccupancyState& s : result.states) value.emplace(s, 0.0);

    double residual = 0.0;
    int sweep = 0;
    for (; sweep < max_sweeps; ++sweep) {
        residual = 0.0;
        for (const OccupancyState& s : result.states) {
            auto& row = result.q.at(s);
            for (int a = 1; a <= n_layers; ++a) {
                const int engaged = s[static_cast<size_t>(a - 1)];
                const double p = (a == n_layers) ? 1.0 : params.exit_prob[static_cast<size_t>(a - 1)];
                OccupancyState next = s;
                next[static_cast<size_t>(a - 1)] = 0;
                double expected_next = 0.0;
                const std::vector<double> pmf = binomial_pmf(engaged, p);
                for (int e = 0; e <= engaged; ++e) {
                    if (pmf[static_cast<size_t>(e)] == 0.0) continue;
                    OccupancyState branch = next;
                    branch[0] += e;
                    if (a < n_layers) branch[static_cast<size_t>(a)] += engaged - e;
                    expected_next += pmf[static_cast<size_t>(e)] * value.at(branch);
                }
                const double updated = engaged + params.discount * expected_next;
                residual = std::max(residual, std::abs(updated - row[static_cast<size_t>(a - 1)]));
                row[static_cast<size_t>(a - 1)] = updated;
            }
        }
        for (const OccupancyState& s : result.states) {
            const auto& row = result.q.at(s);
            double best = row[0];
            for (double x : row) best = std::max(best, x);
            value.at(s) = best;
        }
        if (residual < tol) {
            ++sweep;
            break;
        }
    }
    result.sweeps = sweep;
    result.residual = residual;
    return result;
}

}  // namespace exitlab
