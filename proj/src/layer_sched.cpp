#include "exitlab/layer_sched.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace exitlab {

void MdpParams::validate() const {
    if (n_layers < 1) throw std::invalid_argument("MdpParams: n_layers must be >= 1");
    if (population < 1) throw std::invalid_argument("MdpParams: population must be >= 1");
    if (exit_prob.size() != static_cast<size_t>(n_layers)) {
        throw std::invalid_argument("MdpParams: exit_prob must have one entry per layer");
    }
    for (double p : exit_prob) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw std::invalid_argument("MdpParams: exit probabilities must be in [0, 1]");
        }
    }
    if (!(discount > 0.0 && discount < 1.0)) {
        throw std::invalid_argument("MdpParams: discount must be in (0, 1)");
    }
    if (!(alpha > 0.0 && alpha <= 1.0)) {
        throw std::invalid_argument("MdpParams: alpha must be in (0, 1]");
    }
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
        throw std::invalid_argument("MdpParams: epsilon must be in [0, 1]");
    }
}

MdpParams MdpParams::uniform(int n_layers, int population, double p, double discount) {
    MdpParams params;
    params.n_layers = n_layers;
    params.population = population;
    params.exit_prob.assign(static_cast<size_t>(n_layers), p);
    params.discount = discount;
    params.validate();
    return params;
}

OccupancyState encode_state(const std::vector<int>& next_layers, int n_layers) {
    if (n_layers < 1) throw std::invalid_argument("encode_state: n_layers must be >= 1");
    OccupancyState v(static_cast<size_t>(n_layers), 0);
    for (int layer : next_layers) {
        if (layer < 1 || layer > n_layers) {
            throw std::invalid_argument("encode_state: layer index " + std::to_string(layer) +
                                        " outside [1, " + std::to_string(n_layers) + "]");
        }
        ++v[static_cast<size_t>(layer - 1)];
    }
    return v;
}

namespace {

void check_action(const OccupancyState& v, int action, const char* op) {
    if (action < 1 || action > static_cast<int>(v.size())) {
        throw std::invalid_argument(std::string(op) + ": action " + std::to_string(action) +
                                    " outside [1, " + std::to_string(v.size()) + "]");
    }
}

}  // namespace

int reward(const OccupancyState& v, int action) {
    check_action(v, action, "reward");
    return v[static_cast<size_t>(action - 1)];
}

OccupancyState transition(const OccupancyState& v, int action, const MdpParams& params,
                          SplitMix64& rng) {
    check_action(v, action, "transition");
    const int n_layers = static_cast<int>(v.size());
    const int engaged = v[static_cast<size_t>(action - 1)];
    const double p = params.exit_prob[static_cast<size_t>(action - 1)];
    OccupancyState next = v;
    next[static_cast<size_t>(action - 1)] = 0;
    int exits = 0;
    if (action == n_layers) {
        exits = engaged;  // no layer L+1: exit is forced
    } else {
        for (int i = 0; i < engaged; ++i) {
            if (rng.next_double() < p) ++exits;
        }
    }
    next[0] += exits;
    if (action < n_layers) {
        next[static_cast<size_t>(action)] += engaged - exits;
    }
    return next;
}

int greedy_action(const OccupancyState& v) {
    if (v.empty()) throw std::invalid_argument("greedy_action: empty state");
    int total = 0;
    for (int c : v) total += c;
    if (total == 0) throw std::invalid_argument("greedy_action: no sequences in state");
    int best = 1;
    for (int a = 2; a <= static_cast<int>(v.size()); ++a) {
        if (v[static_cast<size_t>(a - 1)] > v[static_cast<size_t>(best - 1)]) best = a;
    }
    return best;
}

double q_init(const OccupancyState& v, int action) {
    check_action(v, action, "q_init");
    return static_cast<double>(v[static_cast<size_t>(action - 1)]);
}

size_t OccupancyHash::operator()(const OccupancyState& v) const {
    size_t h = 0x9E3779B97F4A7C15ULL;
    for (int c : v) {
        h ^= static_cast<size_t>(c) + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    }
    return h;
}

double QTable::get(const OccupancyState& v, int action) const {
    check_action(v, action, "QTable::get");
    auto it = table_.find(v);
    if (it == table_.end()) return q_init(v, action);
    return it->second[static_cast<size_t>(action - 1)];
}

double QTable::max_over_actions(const OccupancyState& v) const {
    double best = -std::numeric_limits<double>::infinity();
    for (int a = 1; a <= static_cast<int>(v.size()); ++a) {
        best = std::max(best, get(v, a));
    }
    return best;
}

int QTable::greedy_action(const OccupancyState& v) const {
    int best = 1;
    double best_value = get(v, 1);
    for (int a = 2; a <= static_cast<int>(v.size()); ++a) {
        const double value = get(v, a);
        if (value > best_value) {
            best = a;
            best_value = value;
        }
    }
    return best;
}

std::vector<double>& QTable::row(const OccupancyState& v) {
    auto it = table_.find(v);
    if (it == table_.end()) {
        std::vector<double> init(v.size());
        for (int a = 1; a <= static_cast<int>(v.size()); ++a) {
            init[static_cast<size_t>(a - 1)] = q_init(v, a);
        }
        it = table_.emplace(v, std::move(init)).first;
    }
    return it->second;
}

std::string QTable::to_json() const {
    // Sorted by state for a stable dump.
    std::vector<const OccupancyState*> keys;
    keys.reserve(table_.size());
    for (const auto& [state, values] : table_) keys.push_back(&state);
    std::sort(keys.begin(), keys.end(),
              [](const OccupancyState* a, const OccupancyState* b) { return *a < *b; });
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const OccupancyState* state : keys) {
        j.push_back({{"state", *state}, {"q", table_.at(*state)}});
    }
    return j.dump();
}

void q_learn_step(QTable& q, const OccupancyState& s, int action, double r,
                  const OccupancyState& s_next, double alpha, double discount) {
    check_action(s, action, "q_learn_step");
    const double target = r + discount * q.max_over_actions(s_next);
    double& value = q.row(s)[static_cast<size_t>(action - 1)];
    value += alpha * (target - value);
}

LinearQ LinearQ::identity(int n_layers) {
    LinearQ lq;
    lq.m = Matrix(n_layers, n_layers);
    for (int i = 0; i < n_layers; ++i) lq.m.at(i, i) = 1.0;
    return lq;
}

double LinearQ::predict(const OccupancyState& v, int action) const {
    check_action(v, action, "LinearQ::predict");
    if (static_cast<int>(v.size()) != m.cols) {
        throw std::invalid_argument("LinearQ::predict: state length does not match matrix");
    }
    double acc = 0.0;
    for (size_t i = 0; i < v.size(); ++i) {
        acc += m.at(action - 1, static_cast<int>(i)) * v[i];
    }
    return acc;
}

void LinearQ::update(const OccupancyState& v, int action, double target, double alpha) {
    const double err = target - predict(v, action);
    for (size_t i = 0; i < v.size(); ++i) {
        m.at(action - 1, static_cast<int>(i)) += alpha * err * v[i];
    }
}

std::string LinearQ::to_json() const {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (int r = 0; r < m.rows; ++r) {
        nlohmann::ordered_json row = nlohmann::ordered_json::array();
        for (int c = 0; c < m.cols; ++c) row.push_back(m.at(r, c));
        rows.push_back(std::move(row));
    }
    return rows.dump();
}

uint64_t state_space_size(int n_layers, int population) {
    if (n_layers < 1) throw std::invalid_argument("state_space_size: n_layers must be >= 1");
    if (population < 0) throw std::invalid_argument("state_space_size: population must be >= 0");
    // C(N+L, N) built exactly; each partial value is itself a binomial, so
    // division is exact at every step.
    const uint64_t n = static_cast<uint64_t>(n_layers) + static_cast<uint64_t>(population);
    const uint64_t k = std::min<uint64_t>(static_cast<uint64_t>(population),
                                          static_cast<uint64_t>(n_layers));
    unsigned __int128 acc = 1;
    for (uint64_t i = 1; i <= k; ++i) {
        acc = acc * (n - k + i) / i;
        if (acc > std::numeric_limits<uint64_t>::max()) {
            throw std::overflow_error("state_space_size: binomial(" + std::to_string(n) + ", " +
                                      std::to_string(k) + ") overflows 64 bits");
        }
    }
    return static_cast<uint64_t>(acc);
}

namespace {

// All occupancy vectors with sum <= budget (slack allowed in every slot).
void enumerate_rec(int slots_left, int budget, OccupancyState& prefix,
                   std::vector<OccupancyState>& out) {
    if (slots_left == 0) {
        out.push_back(prefix);
        return;
    }
    for (int c = 0; c <= budget; ++c) {
        prefix.push_back(c);
        enumerate_rec(slots_left - 1, budget - c, prefix, out);
        prefix.pop_back();
    }
}

// Vectors with sum exactly == population; the start states for episodes.
void enumerate_exact_rec(int slots_left, int remaining, OccupancyState& prefix,
                         std::vector<OccupancyState>& out) {
    if (slots_left == 1) {
        prefix.push_back(remaining);
        out.push_back(prefix);
        prefix.pop_back();
        return;
    }
    for (int c = 0; c <= remaining; ++c) {
        prefix.push_back(c);
        enumerate_exact_rec(slots_left - 1, remaining - c, prefix, out);
        prefix.pop_back();
    }
}

std::vector<OccupancyState> enumerate_full_population_states(int n_layers, int population) {
    std::vector<OccupancyState> out;
    OccupancyState prefix;
    enumerate_exact_rec(n_layers, population, prefix, out);
    return out;
}

}  // namespace

std::vector<OccupancyState> enumerate_states(int n_layers, int population) {
    if (n_layers < 1) throw std::invalid_argument("enumerate_states: n_layers must be >= 1");
    if (population < 0) throw std::invalid_argument("enumerate_states: population must be >= 0");
    std::vector<OccupancyState> out;
    OccupancyState prefix;
    enumerate_rec(n_layers, population, prefix, out);
    return out;
}

std::string policy_kind_name(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::greedy: return "greedy";
        case PolicyKind::q_table: return "q_table";
        case PolicyKind::linear: return "linear";
    }
    throw std::logic_error("policy_kind_name: unreachable");
}

PolicyKind policy_kind_from_name(const std::string& name) {
    if (name == "greedy") return PolicyKind::greedy;
    if (name == "q_table") return PolicyKind::q_table;
    if (name == "linear") return PolicyKind::linear;
    throw std::invalid_argument("policy kind: unknown name '" + name +
                                "' (expected greedy|q_table|linear)");
}

Policy make_greedy_policy() {
    Policy p;
    p.kind = PolicyKind::greedy;
    p.act = [](const OccupancyState& v) { return greedy_action(v); };
    return p;
}

int TrainedPolicy::action(const OccupancyState& v) const {
    if (kind == PolicyKind::linear) {
        int best = 1;
        double best_value = lin.predict(v, 1);
        for (int a = 2; a <= static_cast<int>(v.size()); ++a) {
            const double value = lin.predict(v, a);
            if (value > best_value) {
                best = a;
                best_value = value;
            }
        }
        return best;
    }
    return table.greedy_action(v);
}

Policy TrainedPolicy::as_policy() const {
    Policy p;
    p.kind = kind;
    p.act = [copy = *this](const OccupancyState& v) { return copy.action(v); };
    return p;
}

namespace {

// Tabular step size decays with the (state, action) visit count so the
// stochastic targets average out instead of rattling at the base rate.
constexpr double kAlphaDecayVisits = 200.0;

}  // namespace

TrainedPolicy train_policy(PolicyKind kind, const MdpParams& params, int episodes, int horizon,
                           uint64_t seed) {
    if (kind == PolicyKind::greedy) {
        throw std::invalid_argument("train_policy: greedy is not trainable");
    }
    params.validate();
    if (episodes < 0 || horizon < 1) {
        throw std::invalid_argument("train_policy: episodes must be >= 0, horizon >= 1");
    }

    TrainedPolicy trained;
    trained.kind = kind;
    trained.params = params;
    if (kind == PolicyKind::linear) {
        trained.lin = LinearQ::identity(params.n_layers);
    }

    const std::vector<OccupancyState> starts =
        enumerate_full_population_states(params.n_layers, params.population);
    std::unordered_map<OccupancyState, std::vector<int64_t>, OccupancyHash> visits;
    SplitMix64 rng(seed);

    for (int ep = 0; ep < episodes; ++ep) {
        OccupancyState s = starts[static_cast<size_t>(rng.next() % starts.size())];
        for (int step = 0; step < horizon; ++step) {
            int a;
            if (rng.next_double() < params.epsilon) {
                a = 1 + static_cast<int>(rng.next() % static_cast<uint64_t>(params.n_layers));
            } else if (kind == PolicyKind::q_table) {
                a = trained.table.greedy_action(s);
            } else {
                a = trained.action(s);
            }
            const double r = reward(s, a);
            const OccupancyState s_next = transition(s, a, params, rng);
            if (kind == PolicyKind::q_table) {
                auto& counts = visits[s];
                if (counts.empty()) counts.assign(static_cast<size_t>(params.n_layers), 0);
                const int64_t n = counts[static_cast<size_t>(a - 1)]++;
                const double alpha =
                    params.alpha * kAlphaDecayVisits / (kAlphaDecayVisits + static_cast<double>(n));
                q_learn_step(trained.table, s, a, r, s_next, alpha, params.discount);
            } else {
                double best_next = trained.lin.predict(s_next, 1);
                for (int aa = 2; aa <= params.n_layers; ++aa) {
                    best_next = std::max(best_next, trained.lin.predict(s_next, aa));
                }
                trained.lin.update(s, a, r + params.discount * best_next, params.alpha);
            }
            s = s_next;
        }
    }
    return trained;
}

EvalReport evaluate_policy(const Policy& policy, const MdpParams& params, int episodes,
                           int horizon, uint64_t seed) {
    params.validate();
    if (episodes < 0 || horizon < 1) {
        throw std::invalid_argument("evaluate_policy: episodes must be >= 0, horizon >= 1");
    }
    const std::vector<OccupancyState> starts =
        enumerate_full_population_states(params.n_layers, params.population);
    SplitMix64 rng(seed);
    EvalReport report;
    report.action_freq.assign(static_cast<size_t>(params.n_layers), 0.0);
    double total_return = 0.0;
    for (int ep = 0; ep < episodes; ++ep) {
        OccupancyState s = starts[static_cast<size_t>(rng.next() % starts.size())];
        double ret = 0.0;
        double weight = 1.0;
        for (int step = 0; step < horizon; ++step) {
            const int a = policy.act(s);
            ret += weight * reward(s, a);
            weight *= params.discount;
            s = transition(s, a, params, rng);
            ++report.action_freq[static_cast<size_t>(a - 1)];
            ++report.steps;
        }
        total_return += ret;
    }
    report.episodes = episodes;
    if (episodes > 0) report.mean_return = total_return / episodes;
    if (report.steps > 0) {
        for (double& f : report.action_freq) f /= static_cast<double>(report.steps);
    }
    return report;
}

}  // namespace exitlab
