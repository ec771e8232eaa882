#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace exitlab {

struct Request {
    double arrival_time = 0.0;  // simulated seconds
    std::vector<int> prompt;    // nonempty token ids
    int max_new_tokens = 1;
};

struct Workload {
    std::vector<Request> requests;  // nondecreasing arrival_time

    // Sorts by arrival (stable) and checks prompts, lengths and token ids.
    void validate_and_sort(int vocab_size);
};

struct GenParams {
    int n_requests = 8;
    double mean_interarrival = 0.0;  // 0 puts every arrival at t=0
    int prompt_len_min = 1;
    int prompt_len_max = 8;
    int output_len_min = 1;
    int output_len_max = 16;
    uint64_t seed = 0;
    int vocab_size = 256;
    int eos_token = 0;  // excluded from sampled prompt ids; -1 excludes nothing
};

// Deterministic synthetic workload: exponential interarrivals, uniform
// lengths, uniform token ids excluding EOS.
Workload gen_workload(const GenParams& params);

// CSV with header `arrival_time,prompt_len,max_new_tokens` (prompt tokens are
// derived from the row index, see README) or a JSON array of requests with
// explicit token ids. Files ending in .json parse as JSON, anything else as
// CSV. Malformed rows raise errors naming the 1-based line number.
Workload load_trace(const std::string& path, int vocab_size, int eos_token = 0);

}  // namespace exitlab
