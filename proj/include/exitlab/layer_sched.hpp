#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "exitlab/numerics.hpp"

namespace exitlab {

// Layer-level scheduling modeled as a closed-population MDP. The state is
// the occupancy vector v where v[i] counts the sequences whose next
// execution layer is i+1; an action runs one layer; reward is the number of
// engaged sequences. Each engaged sequence exits with its layer's
// probability (forced at the last layer) and restarts at layer 1, otherwise
// it advances one layer. This module is analysis-only: it never drives the
// decoding engine.

using OccupancyState = std::vector<int>;

struct MdpParams {
    int n_layers = 3;
    int population = 2;
    std::vector<double> exit_prob;  // per layer, each in [0, 1]
    double discount = 0.9;          // in (0, 1)
    double alpha = 0.1;             // in (0, 1]
    double epsilon = 0.1;           // in [0, 1]

    void validate() const;
    static MdpParams uniform(int n_layers, int population, double p, double discount = 0.9);
};

// Counting vector from per-sequence next-layer indices; permutation
// invariant. Indices must lie in [1, n_layers].
OccupancyState encode_state(const std::vector<int>& next_layers, int n_layers);

// v[action], the number of sequences the action engages.
int reward(const OccupancyState& v, int action);

// Samples the next state: each engaged sequence exits to layer 1 with
// probability p_action (always when action == L), otherwise moves to
// action+1. Population is conserved.
OccupancyState transition(const OccupancyState& v, int action, const MdpParams& params,
                          SplitMix64& rng);

// argmax_a v[a], ties toward the lowest layer. Throws on an empty population.
int greedy_action(const OccupancyState& v);

// Optimistic-greedy initial value for unseen entries: v[action].
double q_init(const OccupancyState& v, int action);

struct OccupancyHash {
    size_t operator()(const OccupancyState& v) const;
};

// Rows materialize on first touch, initialized by q_init, so reads of unseen
// states behave like the greedy initialization.
class QTable {
public:
    double get(const OccupancyState& v, int action) const;
    double max_over_actions(const OccupancyState& v) const;
    int greedy_action(const OccupancyState& v) const;  // ties toward the lowest layer
    std::vector<double>& row(const OccupancyState& v);
    size_t visited_states() const { return table_.size(); }
    const std::unordered_map<OccupancyState, std::vector<double>, OccupancyHash>& entries() const {
        return table_;
    }
    std::string to_json() const;

private:
    std::unordered_map<OccupancyState, std::vector<double>, OccupancyHash> table_;
};

// One tabular update: Q(S,A) += alpha * (R + discount * max_A' Q(S',A') - Q(S,A)).
void q_learn_step(QTable& q, const OccupancyState& s, int action, double r,
                  const OccupancyState& s_next, double alpha, double discount);

// Linear approximation of the Q-table: Q(v, a) ~= M[a] . v. With M = identity
// the prediction reproduces q_init exactly, which serves as the
// initialization.
struct LinearQ {
    Matrix m;  // L x L

    static LinearQ identity(int n_layers);
    double predict(const OccupancyState& v, int action) const;
    // Semi-gradient step: M[a] += alpha * (target - M[a].v) * v.
    void update(const OccupancyState& v, int action, double target, double alpha);
    std::string to_json() const;
};

// binomial(population + n_layers, population), overflow-checked.
uint64_t state_space_size(int n_layers, int population);

// All occupancy vectors holding at most `population` sequences, in
// lexicographic order: exactly state_space_size(n_layers, population)
// entries. The scheduler may hold fewer sequences than its cap, which is
// what makes the count binomial(N+L, N) rather than the exact-N composition
// count. Episode starts draw from the full-population subset.
std::vector<OccupancyState> enumerate_states(int n_layers, int population);

enum class PolicyKind { greedy, q_table, linear };

std::string policy_kind_name(PolicyKind kind);
PolicyKind policy_kind_from_name(const std::string& name);

struct Policy {
    PolicyKind kind = PolicyKind::greedy;
    std::function<int(const OccupancyState&)> act;
};

Policy make_greedy_policy();

struct TrainedPolicy {
    PolicyKind kind = PolicyKind::q_table;
    MdpParams params;
    QTable table;
    LinearQ lin;

    int action(const OccupancyState& v) const;
    Policy as_policy() const;
};

// Epsilon-greedy training over seeded episodes; episode start states are
// uniform over the full state space. Tabular learning decays the step size
// per (state, action) visit from params.alpha (see README); the linear
// variant uses the constant rate. Deterministic given the seed.
TrainedPolicy train_policy(PolicyKind kind, const MdpParams& params, int episodes, int horizon,
                           uint64_t seed);

struct EvalReport {
    double mean_return = 0.0;
    std::vector<double> action_freq;  // per layer, fraction of steps
    int64_t episodes = 0;
    int64_t steps = 0;
};

// Monte-Carlo mean of the discounted return over seeded episodes with the
// same uniform start-state distribution as training.
EvalReport evaluate_policy(const Policy& policy, const MdpParams& params, int episodes,
                           int horizon, uint64_t seed);

}  // namespace exitlab
