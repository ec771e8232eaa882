#include "exitlab/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "exitlab/engine.hpp"
#include "exitlab/layer_sched.hpp"
#include "exitlab/metrics.hpp"
#include "exitlab/oracle.hpp"
#include "exitlab/workload.hpp"

namespace exitlab {

namespace {

struct ModelFlags {
    int layers = 8;
    int d_model = 64;
    int vocab = 256;
    uint64_t seed = 0;

    void add(CLI::App* app) {
        app->add_option("--layers", layers, "Decoder layers");
        app->add_option("--d-model", d_model, "Hidden size");
        app->add_option("--vocab", vocab, "Vocabulary size");
        app->add_option("--model-seed", seed, "Weight seed");
    }
    ModelConfig config() const { return ModelConfig{layers, d_model, vocab, seed}; }
};

struct WorkloadFlags {
    std::string trace_path;
    int gen_requests = -1;
    double mean_interarrival = 0.0;
    int prompt_len_min = 1, prompt_len_max = 8;
    int output_len_min = 1, output_len_max = 16;
    uint64_t seed = 1;

    void add(CLI::App* app) {
        app->add_option("--workload", trace_path,
                        "Trace file (.json for explicit prompts, anything else CSV)");
        app->add_option("--gen-requests", gen_requests, "Generate a synthetic workload instead");
        app->add_option("--mean-interarrival", mean_interarrival,
                        "Mean of the exponential interarrival gap (simulated seconds)");
        app->add_option("--prompt-len-min", prompt_len_min);
        app->add_option("--prompt-len-max", prompt_len_max);
        app->add_option("--output-len-min", output_len_min);
        app->add_option("--output-len-max", output_len_max);
        app->add_option("--workload-seed", seed, "Workload generator seed");
    }

    Workload build(int vocab, int eos_token) const {
        if (!trace_path.empty() && gen_requests >= 0) {
            throw CLI::ValidationError("workload", "--workload and --gen-requests are exclusive");
        }
        if (!trace_path.empty()) {
            return load_trace(trace_path, vocab, eos_token);
        }
        if (gen_requests < 0) {
            throw CLI::ValidationError("workload",
                                       "one of --workload or --gen-requests is required");
        }
        GenParams p;
        p.n_requests = gen_requests;
        p.mean_interarrival = mean_interarrival;
        p.prompt_len_min = prompt_len_min;
        p.prompt_len_max = prompt_len_max;
        p.output_len_min = output_len_min;
        p.output_len_max = output_len_max;
        p.seed = seed;
        p.vocab_size = vocab;
        p.eos_token = eos_token;
        return gen_workload(p);
    }
};

struct EngineFlags {
    int max_batch = 8;
    int pool_blocks = 4096;
    int block_capacity = 16;
    bool no_eos = false;
    CostModel costs;

    void add(CLI::App* app) {
        app->add_option("--max-batch", max_batch, "Running sequences per iteration");
        app->add_option("--pool-blocks", pool_blocks, "KV block pool size");
        app->add_option("--block-capacity", block_capacity, "Tokens per KV block");
        app->add_flag("--no-eos", no_eos, "Never stop on the EOS token");
        app->add_option("--c-layer-fixed", costs.c_layer_fixed, "Per-layer fixed charge (s)");
        app->add_option("--c-layer-per-seq", costs.c_layer_per_seq,
                        "Per-layer per-sequence charge (s)");
        app->add_option("--c-fill", costs.c_fill_per_seq_layer,
                        "Per-sequence per-layer cache-fill charge (s)");
        app->add_option("--c-check-softmax", costs.c_check_softmax);
        app->add_option("--c-check-classifier", costs.c_check_classifier);
        app->add_option("--c-check-state", costs.c_check_state);
    }

    void apply(EngineConfig& config) const {
        config.max_batch = max_batch;
        config.pool_blocks = pool_blocks;
        config.block_capacity = block_capacity;
        config.eos_token = no_eos ? -1 : 0;
        config.costs = costs;
    }
};

struct ScheduleFlags {
    double lambda0 = 0.85;
    double gamma = 1.0;
    double lambda_min = 0.0;

    void add(CLI::App* app) {
        app->add_option("--lambda0", lambda0, "Base confidence threshold");
        app->add_option("--gamma", gamma, "Per-layer geometric threshold decay, in (0,1]");
        app->add_option("--lambda-min", lambda_min, "Threshold floor");
    }
    ThresholdSchedule schedule() const { return ThresholdSchedule{lambda0, gamma, lambda_min}; }
};

struct MdpFlags {
    int layers = 3;
    int population = 2;
    std::string exit_prob = "0.5";
    double discount = 0.9;
    double alpha = 0.1;
    double epsilon = 0.1;
    std::string probs_transcript;

    void add(CLI::App* app) {
        app->add_option("--sched-layers", layers, "MDP layer count");
        app->add_option("--population", population, "Closed population size N");
        app->add_option("--exit-prob", exit_prob,
                        "Per-layer exit probability: single value or comma list");
        app->add_option("--discount", discount, "Discount rate, in (0,1)");
        app->add_option("--alpha", alpha, "Learning rate");
        app->add_option("--epsilon", epsilon, "Exploration rate");
        app->add_option("--probs-from-transcript", probs_transcript,
                        "Estimate per-layer exit probabilities from an engine transcript");
    }

    MdpParams params() const {
        MdpParams p;
        p.n_layers = layers;
        p.population = population;
        p.discount = discount;
        p.alpha = alpha;
        p.epsilon = epsilon;
        if (!probs_transcript.empty()) {
            const Transcript t = read_transcript_jsonl(probs_transcript);
            p.exit_prob = estimate_exit_probs(t);
            p.n_layers = t.model.n_layers;
        } else {
            std::stringstream ss(exit_prob);
            std::string item;
            std::vector<double> probs;
            while (std::getline(ss, item, ',')) probs.push_back(std::stod(item));
            if (probs.size() == 1) {
                p.exit_prob.assign(static_cast<size_t>(p.n_layers), probs[0]);
            } else {
                p.exit_prob = probs;
            }
        }
        p.validate();
        return p;
    }
};

std::vector<int> parse_token_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    return out;
}

void print_run_summary(const MetricsReport& m, std::ostream& out) {
    out << "tokens " << m.total_tokens << ", iterations " << m.iterations << ", sim time "
        << m.total_sim_time << " s\n";
    out << "throughput " << m.throughput << " tokens/s, inner-token latency "
        << m.inner_token_latency << " s/token\n";
    out << "early-exit rate " << m.early_exit_rate_pct << " %, mean layers/token "
        << m.mean_layers_per_token << "\n";
}

nlohmann::ordered_json eval_report_json(const MdpParams& params, const std::string& kind,
                                        const EvalReport& eval) {
    nlohmann::ordered_json j;
    j["params"] = {{"n_layers", params.n_layers},   {"population", params.population},
                   {"exit_prob", params.exit_prob}, {"discount", params.discount},
                   {"alpha", params.alpha},         {"epsilon", params.epsilon}};
    j["policy_kind"] = kind;
    j["mean_return"] = eval.mean_return;
    j["action_freq"] = eval.action_freq;
    j["episodes"] = eval.episodes;
    return j;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Batched early-exit decoding lab: simulated-clock benchmarks and layer scheduling"};
    app.require_subcommand(1);

    // ---- run ----
    auto* run_cmd = app.add_subcommand("run", "Run one engine benchmark and report metrics");
    ModelFlags run_model;
    WorkloadFlags run_workload;
    EngineFlags run_engine_flags;
    ScheduleFlags run_schedule;
    std::string run_technique = "never";
    std::string run_report_path, run_report_format = "json", run_transcript_path;
    run_model.add(run_cmd);
    run_workload.add(run_cmd);
    run_engine_flags.add(run_cmd);
    run_schedule.add(run_cmd);
    run_cmd->add_option("--technique", run_technique,
                        "softmax|state|classifier|never|always-at=K");
    run_cmd->add_option("--report", run_report_path, "Metrics report path");
    run_cmd->add_option("--format", run_report_format, "Report format: json|csv");
    run_cmd->add_option("--transcript", run_transcript_path, "Transcript JSONL path");
    run_cmd->callback([&]() {
        EngineConfig config;
        config.model = run_model.config();
        config.technique = technique_from_name(run_technique);
        config.schedule = run_schedule.schedule();
        run_engine_flags.apply(config);
        const Workload workload = run_workload.build(config.model.vocab_size, config.eos_token);
        const RunResult result = run_engine(workload, config);
        print_run_summary(result.metrics, std::cout);
        if (!run_report_path.empty()) {
            write_report(result.metrics, run_report_path, run_report_format);
            std::cout << "report written to " << run_report_path << "\n";
        }
        if (!run_transcript_path.empty()) {
            write_transcript_jsonl(result.transcript, run_transcript_path);
            std::cout << "transcript written to " << run_transcript_path << "\n";
        }
    });

    // ---- compare ----
    auto* cmp_cmd = app.add_subcommand(
        "compare", "Run the same workload under several techniques plus `never`");
    ModelFlags cmp_model;
    WorkloadFlags cmp_workload;
    EngineFlags cmp_engine;
    ScheduleFlags cmp_schedule;
    std::string cmp_techniques = "softmax:0.85,classifier:0.9,state:0.95";
    std::string cmp_report_path;
    cmp_model.add(cmp_cmd);
    cmp_workload.add(cmp_cmd);
    cmp_engine.add(cmp_cmd);
    cmp_schedule.add(cmp_cmd);
    cmp_cmd->add_option("--techniques", cmp_techniques,
                        "Comma list; `name` or `name:lambda0` (e.g. state:0.95)");
    cmp_cmd->add_option("--report", cmp_report_path, "Per-technique metrics JSON");
    cmp_cmd->callback([&]() {
        EngineConfig base;
        base.model = cmp_model.config();
        base.schedule = cmp_schedule.schedule();
        cmp_engine.apply(base);
        const Workload workload = cmp_workload.build(base.model.vocab_size, base.eos_token);

        std::vector<ExitTechnique> techniques;
        std::vector<ThresholdSchedule> schedules;
        std::stringstream ss(cmp_techniques);
        std::string item;
        while (std::getline(ss, item, ',')) {
            ThresholdSchedule schedule = base.schedule;
            const size_t colon = item.find(':');
            std::string name = item;
            if (colon != std::string::npos) {
                name = item.substr(0, colon);
                schedule.lambda0 = std::stod(item.substr(colon + 1));
            }
            techniques.push_back(technique_from_name(name));
            schedules.push_back(schedule);
        }
        const CompareResult result = compare_techniques(workload, base, techniques, schedules);
        std::cout << result.table();
        if (!cmp_report_path.empty()) {
            nlohmann::ordered_json j = nlohmann::ordered_json::array();
            for (const CompareEntry& e : result.entries) {
                nlohmann::ordered_json one;
                one["technique"] = e.technique;
                one["throughput_tokens_per_s"] = e.metrics.throughput;
                one["throughput_vs_never"] = e.throughput_vs_never;
                one["inner_token_latency_s"] = e.metrics.inner_token_latency;
                one["latency_vs_never"] = e.latency_vs_never;
                one["early_exit_rate_pct"] = e.metrics.early_exit_rate_pct;
                one["mean_layers_per_token"] = e.metrics.mean_layers_per_token;
                j.push_back(std::move(one));
            }
            std::ofstream out(cmp_report_path);
            if (!out) throw std::runtime_error("compare: cannot open " + cmp_report_path);
            out << j.dump(2) << "\n";
            std::cout << "report written to " << cmp_report_path << "\n";
        }
    });

    // ---- sched-train ----
    auto* train_cmd = app.add_subcommand("sched-train", "Train a layer-scheduling policy");
    MdpFlags train_mdp;
    std::string train_kind = "q_table";
    int train_episodes = 1000, train_horizon = 100;
    uint64_t train_seed = 0;
    std::string train_out;
    train_mdp.add(train_cmd);
    train_cmd->add_option("--kind", train_kind, "q_table|linear");
    train_cmd->add_option("--episodes", train_episodes);
    train_cmd->add_option("--horizon", train_horizon);
    train_cmd->add_option("--seed", train_seed);
    train_cmd->add_option("--out", train_out, "Write the trained table/matrix as JSON");
    train_cmd->callback([&]() {
        const MdpParams params = train_mdp.params();
        const PolicyKind kind = policy_kind_from_name(train_kind);
        const TrainedPolicy trained =
            train_policy(kind, params, train_episodes, train_horizon, train_seed);
        const std::string dump =
            kind == PolicyKind::linear ? trained.lin.to_json() : trained.table.to_json();
        if (train_out.empty()) {
            std::cout << dump << "\n";
        } else {
            std::ofstream out(train_out);
            if (!out) throw std::runtime_error("sched-train: cannot open " + train_out);
            out << dump << "\n";
            std::cout << "policy written to " << train_out << "\n";
        }
        std::cout << "trained " << policy_kind_name(kind) << " on " << train_episodes
                  << " episodes\n";
    });

    // ---- sched-eval ----
    auto* eval_cmd = app.add_subcommand("sched-eval", "Evaluate a layer-scheduling policy");
    MdpFlags eval_mdp;
    std::string eval_policy = "greedy";
    int eval_train_episodes = 1000, eval_episodes = 1000, eval_horizon = 100;
    uint64_t eval_seed = 0;
    bool eval_oracle_check = false;
    std::string eval_out;
    eval_mdp.add(eval_cmd);
    eval_cmd->add_option("--policy", eval_policy, "greedy|q_table|linear");
    eval_cmd->add_option("--train-episodes", eval_train_episodes,
                         "Training episodes for q_table/linear policies");
    eval_cmd->add_option("--episodes", eval_episodes, "Evaluation episodes");
    eval_cmd->add_option("--horizon", eval_horizon);
    eval_cmd->add_option("--seed", eval_seed);
    eval_cmd->add_flag("--oracle-check", eval_oracle_check,
                       "Also report the max-norm gap to exact value iteration");
    eval_cmd->add_option("--out", eval_out, "Write the evaluation report as JSON");
    eval_cmd->callback([&]() {
        const MdpParams params = eval_mdp.params();
        const PolicyKind kind = policy_kind_from_name(eval_policy);
        Policy policy;
        TrainedPolicy trained;
        if (kind == PolicyKind::greedy) {
            policy = make_greedy_policy();
        } else {
            trained = train_policy(kind, params, eval_train_episodes, eval_horizon, eval_seed);
            policy = trained.as_policy();
        }
        const EvalReport eval = evaluate_policy(policy, params, eval_episodes, eval_horizon,
                                                eval_seed + 1);
        nlohmann::ordered_json j = eval_report_json(params, policy_kind_name(kind), eval);
        if (eval_oracle_check && kind == PolicyKind::q_table) {
            const ValueIterationResult vi = value_iteration(params);
            double max_err = 0.0;
            for (const auto& [state, values] : trained.table.entries()) {
                for (int a = 1; a <= params.n_layers; ++a) {
                    max_err = std::max(max_err, std::abs(values[static_cast<size_t>(a - 1)] -
                                                         vi.optimal_q(state, a)));
                }
            }
            j["oracle_max_abs_q_error"] = max_err;
            j["oracle_sweeps"] = vi.sweeps;
        }
        std::cout << "policy " << policy_kind_name(kind) << ": mean discounted return "
                  << eval.mean_return << " over " << eval_episodes << " episodes\n";
        if (eval_out.empty()) {
            std::cout << j.dump(2) << "\n";
        } else {
            std::ofstream out(eval_out);
            if (!out) throw std::runtime_error("sched-eval: cannot open " + eval_out);
            out << j.dump(2) << "\n";
            std::cout << "report written to " << eval_out << "\n";
        }
    });

    // ---- oracle ----
    auto* oracle_cmd =
        app.add_subcommand("oracle", "Run the reference oracles (value iteration, full decode)");
    std::string oracle_mode = "value-iteration";
    MdpFlags oracle_mdp;
    ModelFlags oracle_model;
    std::string oracle_prompt = "1";
    int oracle_max_new = 8;
    bool oracle_no_eos = false;
    oracle_cmd->add_option("--mode", oracle_mode, "value-iteration|reference-decode");
    oracle_mdp.add(oracle_cmd);
    oracle_model.add(oracle_cmd);
    oracle_cmd->add_option("--prompt", oracle_prompt, "Comma-separated prompt token ids");
    oracle_cmd->add_option("--max-new", oracle_max_new, "Tokens to decode");
    oracle_cmd->add_flag("--no-eos", oracle_no_eos);
    oracle_cmd->callback([&]() {
        if (oracle_mode == "value-iteration") {
            const MdpParams params = oracle_mdp.params();
            const ValueIterationResult vi = value_iteration(params);
            nlohmann::ordered_json j = nlohmann::ordered_json::array();
            for (const OccupancyState& s : vi.states) {
                j.push_back({{"state", s}, {"q", vi.q.at(s)}});
            }
            std::cout << j.dump(2) << "\n";
            std::cout << "converged in " << vi.sweeps << " sweeps, residual " << vi.residual
                      << "\n";
        } else if (oracle_mode == "reference-decode") {
            const ModelWeights weights = ModelWeights::seeded(oracle_model.config());
            const std::vector<int> prompt = parse_token_list(oracle_prompt);
            const std::vector<int> tokens =
                reference_decode(weights, prompt, oracle_max_new, oracle_no_eos ? -1 : 0);
            nlohmann::ordered_json j;
            j["tokens"] = tokens;
            std::cout << j.dump() << "\n";
        } else {
            throw CLI::ValidationError("--mode", "expected value-iteration|reference-decode");
        }
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.push_back("exitlab");
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace exitlab
