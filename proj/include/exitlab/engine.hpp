#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "exitlab/exit_policy.hpp"
#include "exitlab/kv_cache.hpp"
#include "exitlab/model.hpp"
#include "exitlab/workload.hpp"

namespace exitlab {

// Per-iteration charges on the simulated clock, in seconds. Defaults order
// the exit-check costs so the similarity check is the cheapest and the
// softmax/classifier checks pay for an extra projection.
struct CostModel {
    double c_layer_fixed = 1e-3;
    double c_layer_per_seq = 1e-4;
    double c_fill_per_seq_layer = 2e-5;
    double c_check_softmax = 5e-5;
    double c_check_classifier = 5e-5;
    double c_check_state = 1e-5;

    double check_cost(const ExitTechnique& technique) const;  // never/always_at charge 0
    void validate() const;
};

struct EngineConfig {
    ModelConfig model;
    ExitTechnique technique = ExitTechnique::never();
    ThresholdSchedule schedule;
    CostModel costs;
    int max_batch = 8;
    int pool_blocks = 4096;
    int block_capacity = 16;
    int eos_token = 0;        // -1 disables EOS stopping
    bool capture_kv = false;  // snapshot per-sequence K/V and exit states into the transcript

    void validate() const;
};

// Per-iteration exit status: one boolean per batch slot, OR-latched as the
// layers run, so a sequence that accepts once stays accepted for the rest of
// the iteration even if a later layer's check fails.
class ExitStatusVector {
public:
    explicit ExitStatusVector(int batch_size);

    // Latches this layer's accept decisions; returns true once every slot is
    // set. Records the first accepting layer on each false-to-true edge.
    bool observe_layer(int layer, const std::vector<bool>& accepted);

    bool all_set() const;
    bool is_set(int slot) const { return status_[static_cast<size_t>(slot)]; }
    int size() const { return static_cast<int>(status_.size()); }

    // First layer at which the slot accepted, or `fallback` if it never did.
    int first_accept_layer(int slot, int fallback) const;

private:
    std::vector<bool> status_;
    std::vector<int> first_accept_;
};

struct IterationPerSeq {
    int seq_id = 0;
    int accept_layer = 0;  // the sequence's own first-accept layer (L if none)
    int token = 0;
};

struct IterationRecord {
    double clock = 0.0;  // after this iteration's charge
    double charge = 0.0;
    std::vector<int> batch_ids;
    int output_layer = 0;
    std::vector<IterationPerSeq> per_seq;
};

struct PrefillRecord {
    double clock = 0.0;
    double charge = 0.0;
    int seq_id = 0;
    int positions = 0;  // prompt positions processed (prompt_len - 1)
};

struct SequenceRecord {
    int id = 0;
    double arrival_time = 0.0;
    double first_token_time = -1.0;
    double finish_time = -1.0;
    int max_new_tokens = 0;
    std::vector<int> prompt;
    std::vector<int> tokens;
    std::vector<int> exit_layers;         // per token: own first-accept layer
    std::vector<int> iter_output_layers;  // per token: the batch's exit layer that iteration
};

struct KvSnapshot {
    Vector k, v;
};

// Debug capture (capture_kv): the sequence's full cache contents at release
// plus the exit hidden state of every decoded token.
struct SequenceKvCapture {
    std::vector<std::vector<KvSnapshot>> kv;  // [layer-1][position]
    std::vector<Vector> exit_states;          // per token
};

struct Transcript {
    ModelConfig model;
    std::string technique;
    std::vector<PrefillRecord> prefills;
    std::vector<IterationRecord> iterations;
    std::vector<SequenceRecord> sequences;  // in finish order
    std::unordered_map<int, SequenceKvCapture> kv_captures;
    KvStats cache_stats;
    double final_clock = 0.0;
    double total_idle = 0.0;  // clock jumps spent waiting for arrivals

    double total_charge() const;  // prefill + iteration charges
};

// Iteration-level batched decoder: between iterations it evicts finished
// sequences and admits pending ones FIFO (a deferred head blocks later
// arrivals); within an iteration it runs layers over the whole batch,
// OR-latches exit status per layer, stops at the first layer where every
// sequence has accepted, fills the skipped layers' K/V from the exit hidden
// states, and emits one token per sequence.
class Engine {
public:
    explicit Engine(EngineConfig config);          // weights seeded from config.model
    Engine(EngineConfig config, ModelWeights weights);

    const ModelWeights& weights() const { return weights_; }
    const EngineConfig& config() const { return config_; }

    // Drives the workload to completion on the simulated clock.
    // Deterministic: identical (workload, config, weights) give identical
    // transcripts.
    Transcript run(const Workload& workload) const;

private:
    EngineConfig config_;
    ModelWeights weights_;
};

// One JSON object per line: a meta record, then prefill/iteration records in
// clock order, then final per-sequence records. KV captures are not
// serialized.
void write_transcript_jsonl(const Transcript& transcript, const std::string& path);
Transcript read_transcript_jsonl(const std::string& path);

}  // namespace exitlab
