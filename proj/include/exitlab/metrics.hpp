#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "exitlab/engine.hpp"
#include "exitlab/workload.hpp"

namespace exitlab {

struct CacheReport {
    int pool_blocks = 0;
    int free_blocks = 0;
    int peak_blocks = 0;
};

// All rate/latency figures are on the simulated clock; wall_clock_info_s is
// informational only and excluded from determinism comparisons.
struct MetricsReport {
    double throughput = 0.0;           // tokens per simulated second
    double inner_token_latency = 0.0;  // sum of (finish - first_token) / tokens
    double early_exit_rate_pct = 0.0;  // tokens decoded by iterations with output_layer < L
    std::vector<int64_t> exit_layer_histogram;    // [layer-1] -> tokens, by iteration exit layer
    std::vector<int64_t> accept_layer_histogram;  // [layer-1] -> tokens, by own first-accept layer
    double mean_layers_per_token = 0.0;
    double total_sim_time = 0.0;
    double total_idle_time = 0.0;
    int64_t total_tokens = 0;
    int64_t iterations = 0;
    int n_layers = 0;
    CacheReport cache;
    double wall_clock_info_s = 0.0;
};

// Throughput = tokens / total simulated time; inner-token latency = sum over
// sequences of (finish - first_token) divided by total tokens; early-exit
// rate counts decoded tokens whose iteration exited before the last layer.
// Throws if any sequence is unfinished.
MetricsReport compute_metrics(const Transcript& transcript);

// format is "json" or "csv"; fields keep a stable order and full precision
// so a written report reads back equal.
void write_report(const MetricsReport& report, const std::string& path, const std::string& format);
MetricsReport read_report(const std::string& path, const std::string& format);

struct RunResult {
    Transcript transcript;
    MetricsReport metrics;
};

// End-to-end driver: build the engine, run the workload, compute metrics.
RunResult run_engine(const Workload& workload, const EngineConfig& config);
RunResult run_engine(const Workload& workload, const EngineConfig& config,
                     const ModelWeights& weights);

struct CompareEntry {
    std::string technique;
    MetricsReport metrics;
    double throughput_vs_never = 0.0;
    double latency_vs_never = 0.0;  // never latency / technique latency
};

struct CompareResult {
    std::vector<CompareEntry> entries;  // never first, then the requested order
    std::string table() const;          // human-readable ratio table
};

// Runs the same workload under each technique plus `never` on shared
// weights; thresholds come from the per-technique schedules.
CompareResult compare_techniques(const Workload& workload, const EngineConfig& base,
                                 const std::vector<ExitTechnique>& techniques,
                                 const std::vector<ThresholdSchedule>& schedules);

// Empirical per-layer accept frequency among sequences that reached the
// layer still unaccepted; feeds the scheduling simulator from real
// transcripts.
std::vector<double> estimate_exit_probs(const Transcript& transcript);

}  // namespace exitlab
