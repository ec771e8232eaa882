#pragma once

#include <unordered_map>
#include <vector>

#include "exitlab/layer_sched.hpp"
#include "exitlab/model.hpp"

namespace exitlab {

// Independent reference paths used to check the engine and the scheduler.
// These share only the weight tensors and the basic dense kernels with the
// implementations they verify: no KvStore, no batching, no Q-learning.

// Single-sequence full-depth greedy decoder over plain K/V lists.
// eos_token < 0 disables EOS stopping.
std::vector<int> reference_decode(const ModelWeights& weights, const std::vector<int>& prompt,
                                  int max_new_tokens, int eos_token);

struct ReplayKvEntry {
    Vector k, v;
};

struct SequenceReplay {
    std::vector<std::vector<ReplayKvEntry>> kv;  // [layer-1][position]
    std::vector<Vector> exit_states;             // per decoded token
    std::vector<int> tokens;                     // regenerated greedily from the exit states
};

// Re-executes one sequence alone, honoring a recorded per-token exit layer:
// each decoded position runs layers 1..exit, then projects the exit state
// through the remaining layers' K/V matrices exactly once each. Later
// positions attend over those filled entries, mirroring what the batched
// engine leaves in its cache.
SequenceReplay replay_sequence(const ModelWeights& weights, const std::vector<int>& prompt,
                               const std::vector<int>& per_token_output_layers);

struct ValueIterationResult {
    MdpParams params;
    std::vector<OccupancyState> states;
    std::unordered_map<OccupancyState, std::vector<double>, OccupancyHash> q;  // Q*(s, .)
    int sweeps = 0;
    double residual = 0.0;

    double optimal_q(const OccupancyState& v, int action) const;
    double optimal_value(const OccupancyState& v) const;
    int optimal_action(const OccupancyState& v) const;  // ties toward the lowest layer
};

// Exact Q* by dynamic programming over the full occupancy-state space, with
// the binomial transition distribution expanded in closed form. Converges by
// contraction for any discount < 1.
ValueIterationResult value_iteration(const MdpParams& params, double tol = 1e-12,
                                     int max_sweeps = 1000000);

}  // namespace exitlab
