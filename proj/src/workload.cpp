#include "exitlab/workload.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "exitlab/numerics.hpp"

namespace exitlab {

void Workload::validate_and_sort(int vocab_size) {
    std::stable_sort(requests.begin(), requests.end(),
                     [](const Request& a, const Request& b) {
                         return a.arrival_time < b.arrival_time;
                     });
    for (size_t i = 0; i < requests.size(); ++i) {
        const Request& r = requests[i];
        const std::string where = "request " + std::to_string(i);
        if (r.arrival_time < 0.0) {
            throw std::invalid_argument("workload: negative arrival_time at " + where);
        }
        if (r.prompt.empty()) {
            throw std::invalid_argument("workload: empty prompt at " + where);
        }
        if (r.max_new_tokens < 1) {
            throw std::invalid_argument("workload: max_new_tokens must be >= 1 at " + where);
        }
        for (int id : r.prompt) {
            if (id < 0 || id >= vocab_size) {
                throw std::invalid_argument("workload: token id " + std::to_string(id) +
                                            " outside vocab at " + where);
            }
        }
    }
}

namespace {

// Uniform token id over the vocab with the EOS id excluded.
int sample_token(SplitMix64& rng, int vocab_size, int eos_token) {
    const bool exclude = eos_token >= 0 && eos_token < vocab_size;
    const int span = exclude ? vocab_size - 1 : vocab_size;
    int id = static_cast<int>(rng.next() % static_cast<uint64_t>(span));
    if (exclude && id >= eos_token) ++id;
    return id;
}

int sample_range(SplitMix64& rng, int lo, int hi) {
    return lo + static_cast<int>(rng.next() % static_cast<uint64_t>(hi - lo + 1));
}

}  // namespace

Workload gen_workload(const GenParams& params) {
    if (params.n_requests < 0) throw std::invalid_argument("gen_workload: n_requests must be >= 0");
    if (params.mean_interarrival < 0.0) {
        throw std::invalid_argument("gen_workload: mean_interarrival must be >= 0");
    }
    if (params.prompt_len_min < 1 || params.prompt_len_max < params.prompt_len_min) {
        throw std::invalid_argument("gen_workload: bad prompt length range");
    }
    if (params.output_len_min < 1 || params.output_len_max < params.output_len_min) {
        throw std::invalid_argument("gen_workload: bad output length range");
    }
    if (params.vocab_size < 2) throw std::invalid_argument("gen_workload: vocab_size must be >= 2");

    SplitMix64 rng(params.seed);
    Workload w;
    double arrival = 0.0;
    for (int i = 0; i < params.n_requests; ++i) {
        if (params.mean_interarrival > 0.0) {
            arrival += -params.mean_interarrival * std::log(1.0 - rng.next_double());
        }
        Request req;
        req.arrival_time = arrival;
        const int prompt_len = sample_range(rng, params.prompt_len_min, params.prompt_len_max);
        req.prompt.reserve(static_cast<size_t>(prompt_len));
        for (int j = 0; j < prompt_len; ++j) {
            req.prompt.push_back(sample_token(rng, params.vocab_size, params.eos_token));
        }
        req.max_new_tokens = sample_range(rng, params.output_len_min, params.output_len_max);
        w.requests.push_back(std::move(req));
    }
    return w;
}

namespace {

double parse_double_field(const std::string& field, int line_no, const char* name) {
    try {
        size_t used = 0;
        const double x = std::stod(field, &used);
        if (used != field.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw std::invalid_argument("trace: line " + std::to_string(line_no) + ": bad " +
                                    std::string(name) + " '" + field + "'");
    }
}

int parse_int_field(const std::string& field, int line_no, const char* name) {
    try {
        size_t used = 0;
        const int x = std::stoi(field, &used);
        if (used != field.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        throw std::invalid_argument("trace: line " + std::to_string(line_no) + ": bad " +
                                    std::string(name) + " '" + field + "'");
    }
}

std::string trim(const std::string& s) {
    const size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

Workload load_csv_trace(const std::string& path, int vocab_size, int eos_token) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("trace: cannot open " + path);
    std::string line;
    int line_no = 0;
    if (!std::getline(in, line)) {
        throw std::invalid_argument("trace: " + path + " is empty (expected header)");
    }
    ++line_no;
    if (trim(line) != "arrival_time,prompt_len,max_new_tokens") {
        throw std::invalid_argument(
            "trace: line 1: header must be 'arrival_time,prompt_len,max_new_tokens'");
    }
    Workload w;
    int row = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(trim(field));
        if (fields.size() != 3) {
            throw std::invalid_argument("trace: line " + std::to_string(line_no) +
                                        ": expected 3 fields, got " +
                                        std::to_string(fields.size()));
        }
        Request req;
        req.arrival_time = parse_double_field(fields[0], line_no, "arrival_time");
        const int prompt_len = parse_int_field(fields[1], line_no, "prompt_len");
        req.max_new_tokens = parse_int_field(fields[2], line_no, "max_new_tokens");
        if (req.arrival_time < 0.0) {
            throw std::invalid_argument("trace: line " + std::to_string(line_no) +
                                        ": negative arrival_time");
        }
        if (prompt_len < 1) {
            throw std::invalid_argument("trace: line " + std::to_string(line_no) +
                                        ": prompt_len must be >= 1");
        }
        if (req.max_new_tokens < 1) {
            throw std::invalid_argument("trace: line " + std::to_string(line_no) +
                                        ": max_new_tokens must be >= 1");
        }
        // Prompt tokens derive from the row index so a trace pins its
        // prompts without storing them.
        SplitMix64 rng(static_cast<uint64_t>(row));
        req.prompt.reserve(static_cast<size_t>(prompt_len));
        for (int j = 0; j < prompt_len; ++j) {
            req.prompt.push_back(sample_token(rng, vocab_size, eos_token));
        }
        w.requests.push_back(std::move(req));
        ++row;
    }
    return w;
}

Workload load_json_trace(const std::string& path, int vocab_size) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("trace: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument("trace: " + path + ": " + e.what());
    }
    if (!j.is_array()) {
        throw std::invalid_argument("trace: " + path + ": expected a JSON array of requests");
    }
    Workload w;
    for (size_t i = 0; i < j.size(); ++i) {
        const auto& item = j[i];
        const std::string where = "trace: request " + std::to_string(i);
        Request req;
        try {
            req.arrival_time = item.at("arrival_time").get<double>();
            req.prompt = item.at("prompt").get<std::vector<int>>();
            req.max_new_tokens = item.at("max_new_tokens").get<int>();
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument(where + ": " + e.what());
        }
        if (req.arrival_time < 0.0) throw std::invalid_argument(where + ": negative arrival_time");
        if (req.prompt.empty()) throw std::invalid_argument(where + ": empty prompt");
        if (req.max_new_tokens < 1) {
            throw std::invalid_argument(where + ": max_new_tokens must be >= 1");
        }
        for (int id : req.prompt) {
            if (id < 0 || id >= vocab_size) {
                throw std::invalid_argument(where + ": token id " + std::to_string(id) +
                                            " outside vocab");
            }
        }
        w.requests.push_back(std::move(req));
    }
    return w;
}

}  // namespace

Workload load_trace(const std::string& path, int vocab_size, int eos_token) {
    Workload w;
    if (path.size() >= 5 && path.compare(path.size() - 5, 5, ".json") == 0) {
        w = load_json_trace(path, vocab_size);
    } else {
        w = load_csv_trace(path, vocab_size, eos_token);
    }
    w.validate_and_sort(vocab_size);
    return w;
}

}  // namespace exitlab
