#include "exitlab/metrics.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace exitlab {

MetricsReport compute_metrics(const Transcript& transcript) {
    const int n_layers = transcript.model.n_layers;
    MetricsReport r;
    r.n_layers = n_layers;
    r.exit_layer_histogram.assign(static_cast<size_t>(n_layers), 0);
    r.accept_layer_histogram.assign(static_cast<size_t>(n_layers), 0);
    r.total_sim_time = transcript.final_clock;
    r.total_idle_time = transcript.total_idle;
    r.iterations = static_cast<int64_t>(transcript.iterations.size());
    r.cache = {transcript.cache_stats.pool_blocks, transcript.cache_stats.free_blocks,
               transcript.cache_stats.peak_blocks_in_use};

    double latency_sum = 0.0;
    for (const SequenceRecord& s : transcript.sequences) {
        if (s.finish_time < 0.0 || s.first_token_time < 0.0) {
            throw std::invalid_argument("compute_metrics: sequence " + std::to_string(s.id) +
                                        " is unfinished");
        }
        r.total_tokens += static_cast<int64_t>(s.tokens.size());
        latency_sum += s.finish_time - s.first_token_time;
        for (int a : s.exit_layers) {
            ++r.accept_layer_histogram[static_cast<size_t>(a - 1)];
        }
    }

    int64_t early_tokens = 0;
    int64_t layer_sum = 0;
    for (const IterationRecord& it : transcript.iterations) {
        const auto batch = static_cast<int64_t>(it.per_seq.size());
        r.exit_layer_histogram[static_cast<size_t>(it.output_layer - 1)] += batch;
        layer_sum += batch * it.output_layer;
        if (it.output_layer < n_layers) early_tokens += batch;
    }

    if (r.total_tokens > 0) {
        r.inner_token_latency = latency_sum / static_cast<double>(r.total_tokens);
        r.early_exit_rate_pct = 100.0 * static_cast<double>(early_tokens) /
                                static_cast<double>(r.total_tokens);
        r.mean_layers_per_token = static_cast<double>(layer_sum) /
                                  static_cast<double>(r.total_tokens);
        if (r.total_sim_time > 0.0) {
            r.throughput = static_cast<double>(r.total_tokens) / r.total_sim_time;
        }
    }
    return r;
}

namespace {

nlohmann::ordered_json report_to_json(const MetricsReport& r) {
    nlohmann::ordered_json j;
    j["throughput_tokens_per_s"] = r.throughput;
    j["inner_token_latency_s"] = r.inner_token_latency;
    j["early_exit_rate_pct"] = r.early_exit_rate_pct;
    j["exit_layer_histogram"] = r.exit_layer_histogram;
    j["accept_layer_histogram"] = r.accept_layer_histogram;
    j["mean_layers_per_token"] = r.mean_layers_per_token;
    j["total_sim_time_s"] = r.total_sim_time;
    j["total_idle_time_s"] = r.total_idle_time;
    j["total_tokens"] = r.total_tokens;
    j["iterations"] = r.iterations;
    j["n_layers"] = r.n_layers;
    j["cache"] = {{"pool_blocks", r.cache.pool_blocks},
                  {"free_blocks", r.cache.free_blocks},
                  {"peak_blocks", r.cache.peak_blocks}};
    j["wall_clock_info_s"] = r.wall_clock_info_s;
    return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.throughput = j.at("throughput_tokens_per_s").get<double>();
    r.inner_token_latency = j.at("inner_token_latency_s").get<double>();
    r.early_exit_rate_pct = j.at("early_exit_rate_pct").get<double>();
    r.exit_layer_histogram = j.at("exit_layer_histogram").get<std::vector<int64_t>>();
    r.accept_layer_histogram = j.at("accept_layer_histogram").get<std::vector<int64_t>>();
    r.mean_layers_per_token = j.at("mean_layers_per_token").get<double>();
    r.total_sim_time = j.at("total_sim_time_s").get<double>();
    r.total_idle_time = j.at("total_idle_time_s").get<double>();
    r.total_tokens = j.at("total_tokens").get<int64_t>();
    r.iterations = j.at("iterations").get<int64_t>();
    r.n_layers = j.at("n_layers").get<int>();
    r.cache.pool_blocks = j.at("cache").at("pool_blocks").get<int>();
    r.cache.free_blocks = j.at("cache").at("free_blocks").get<int>();
    r.cache.peak_blocks = j.at("cache").at("peak_blocks").get<int>();
    r.wall_clock_info_s = j.at("wall_clock_info_s").get<double>();
    return r;
}

std::string fmt_double(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

void write_csv_report(const MetricsReport& r, std::ostream& out) {
    out << "metric,value\n";
    out << "throughput_tokens_per_s," << fmt_double(r.throughput) << "\n";
    out << "inner_token_latency_s," << fmt_double(r.inner_token_latency) << "\n";
    out << "early_exit_rate_pct," << fmt_double(r.early_exit_rate_pct) << "\n";
    out << "mean_layers_per_token," << fmt_double(r.mean_layers_per_token) << "\n";
    out << "total_sim_time_s," << fmt_double(r.total_sim_time) << "\n";
    out << "total_idle_time_s," << fmt_double(r.total_idle_time) << "\n";
    out << "total_tokens," << r.total_tokens << "\n";
    out << "iterations," << r.iterations << "\n";
    out << "n_layers," << r.n_layers << "\n";
    out << "cache_pool_blocks," << r.cache.pool_blocks << "\n";
    out << "cache_free_blocks," << r.cache.free_blocks << "\n";
    out << "cache_peak_blocks," << r.cache.peak_blocks << "\n";
    out << "wall_clock_info_s," << fmt_double(r.wall_clock_info_s) << "\n";
    for (size_t i = 0; i < r.exit_layer_histogram.size(); ++i) {
        out << "exit_layer_" << (i + 1) << "," << r.exit_layer_histogram[i] << "\n";
    }
    for (size_t i = 0; i < r.accept_layer_histogram.size(); ++i) {
        out << "accept_layer_" << (i + 1) << "," << r.accept_layer_histogram[i] << "\n";
    }
}

MetricsReport read_csv_report(std::istream& in, const std::string& path) {
    MetricsReport r;
    std::string line;
    if (!std::getline(in, line) || line != "metric,value") {
        throw std::invalid_argument("report: " + path + ": missing 'metric,value' header");
    }
    std::vector<std::pair<std::string, std::string>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t comma = line.find(',');
        if (comma == std::string::npos) {
            throw std::invalid_argument("report: " + path + ": bad row '" + line + "'");
        }
        rows.emplace_back(line.substr(0, comma), line.substr(comma + 1));
    }
    auto take = [&](const std::string& key) -> std::string {
        for (const auto& [k, v] : rows) {
            if (k == key) return v;
        }
        throw std::invalid_argument("report: " + path + ": missing metric '" + key + "'");
    };
    r.throughput = std::stod(take("throughput_tokens_per_s"));
    r.inner_token_latency = std::stod(take("inner_token_latency_s"));
    r.early_exit_rate_pct = std::stod(take("early_exit_rate_pct"));
    r.mean_layers_per_token = std::stod(take("mean_layers_per_token"));
    r.total_sim_time = std::stod(take("total_sim_time_s"));
    r.total_idle_time = std::stod(take("total_idle_time_s"));
    r.total_tokens = std::stoll(take("total_tokens"));
    r.iterations = std::stoll(take("iterations"));
    r.n_layers = std::stoi(take("n_layers"));
    r.cache.pool_blocks = std::stoi(take("cache_pool_blocks"));
    r.cache.free_blocks = std::stoi(take("cache_free_blocks"));
    r.cache.peak_blocks = std::stoi(take("cache_peak_blocks"));
    r.wall_clock_info_s = std::stod(take("wall_clock_info_s"));
    r.exit_layer_histogram.assign(static_cast<size_t>(r.n_layers), 0);
    r.accept_layer_histogram.assign(static_cast<size_t>(r.n_layers), 0);
    for (int i = 1; i <= r.n_layers; ++i) {
        r.exit_layer_histogram[static_cast<size_t>(i - 1)] =
            std::stoll(take("exit_layer_" + std::to_string(i)));
        r.accept_layer_histogram[static_cast<size_t>(i - 1)] =
            std::stoll(take("accept_layer_" + std::to_string(i)));
    }
    return r;
}

}  // namespace

void write_report(const MetricsReport& report, const std::string& path,
                  const std::string& format) {
    if (format != "json" && format != "csv") {
        throw std::invalid_argument("write_report: unsupported format '" + format +
                                    "' (expected json or csv)");
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_report: cannot open " + path + " for writing");
    if (format == "json") {
        out << report_to_json(report).dump(2) << "\n";
    } else {
        write_csv_report(report, out);
    }
    if (!out) throw std::runtime_error("write_report: write failed for " + path);
}

MetricsReport read_report(const std::string& path, const std::string& format) {
    if (format != "json" && format != "csv") {
        throw std::invalid_argument("read_report: unsupported format '" + format + "'");
    }
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_report: cannot open " + path);
    if (format == "json") {
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument("report: " + path + ": " + e.what());
        }
        return report_from_json(j);
    }
    return read_csv_report(in, path);
}

RunResult run_engine(const Workload& workload, const EngineConfig& config) {
    return run_engine(workload, config, ModelWeights::seeded(config.model));
}

RunResult run_engine(const Workload& workload, const EngineConfig& config,
                     const ModelWeights& weights) {
    const auto start = std::chrono::steady_clock::now();
    const Engine engine(config, weights);
    RunResult result;
    result.transcript = engine.run(workload);
    result.metrics = compute_metrics(result.transcript);
    result.metrics.wall_clock_info_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

CompareResult compare_techniques(const Workload& workload, const EngineConfig& base,
                                 const std::vector<ExitTechnique>& techniques,
                                 const std::vector<ThresholdSchedule>& schedules) {
    if (techniques.size() != schedules.size()) {
        throw std::invalid_argument("compare_techniques: one schedule per technique required");
    }
    const ModelWeights weights = ModelWeights::seeded(base.model);

    EngineConfig never_config = base;
    never_config.technique = ExitTechnique::never();
    const RunResult never_run = run_engine(workload, never_config, weights);

    CompareResult result;
    CompareEntry never_entry;
    never_entry.technique = "never";
    never_entry.metrics = never_run.metrics;
    never_entry.throughput_vs_never = 1.0;
    never_entry.latency_vs_never = 1.0;
    result.entries.push_back(std::move(never_entry));

    for (size_t i = 0; i < techniques.size(); ++i) {
        EngineConfig config = base;
        config.technique = techniques[i];
        config.schedule = schedules[i];
        const RunResult run = run_engine(workload, config, weights);
        CompareEntry entry;
        entry.technique = technique_name(techniques[i]);
        entry.metrics = run.metrics;
        entry.throughput_vs_never = never_run.metrics.throughput > 0.0
                                        ? run.metrics.throughput / never_run.metrics.throughput
                                        : 0.0;
        entry.latency_vs_never = run.metrics.inner_token_latency > 0.0
                                     ? never_run.metrics.inner_token_latency /
                                           run.metrics.inner_token_latency
                                     : 0.0;
        result.entries.push_back(std::move(entry));
    }
    return result;
}

std::string CompareResult::table() const {
    std::ostringstream out;
    out << "technique        throughput  tput_ratio  inner_latency  lat_ratio  exit_rate%\n";
    for (const CompareEntry& e : entries) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-16s %10.3f  %10.4f  %13.6f  %9.4f  %10.2f\n",
                      e.technique.c_str(), e.metrics.throughput, e.throughput_vs_never,
                      e.metrics.inner_token_latency, e.latency_vs_never,
                      e.metrics.early_exit_rate_pct);
        out << buf;
    }
    return out.str();
}

std::vector<double> estimate_exit_probs(const Transcript& transcript) {
    const int n_layers = transcript.model.n_layers;
    std::vector<int64_t> attempts(static_cast<size_t>(n_layers), 0);
    std::vector<int64_t> hits(static_cast<size_t>(n_layers), 0);
    for (const SequenceRecord& s : transcript.sequences) {
        for (size_t t = 0; t < s.tokens.size(); ++t) {
            const int accept = s.exit_layers[t];
            const int executed = s.iter_output_layers[t];
            // The token reached layers 1..executed; it was still unaccepted
            // entering layers 1..accept (accept == executed when it never
            // accepted on its own).
            for (int layer = 1; layer <= executed; ++layer) {
                if (layer <= accept) {
                    ++attempts[static_cast<size_t>(layer - 1)];
                    if (layer == accept && accept < n_layers) {
                        ++hits[static_cast<size_t>(layer - 1)];
                    }
                }
            }
        }
    }
    std::vector<double> probs(static_cast<size_t>(n_layers), 0.0);
    for (int layer = 1; layer <= n_layers; ++layer) {
        const size_t i = static_cast<size_t>(layer - 1);
        if (attempts[i] > 0) {
            probs[i] = static_cast<double>(hits[i]) / static_cast<double>(attempts[i]);
        }
    }
    return probs;
}

}  // namespace exitlab
