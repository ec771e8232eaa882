#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "exitlab/numerics.hpp"

namespace exitlab {

struct KvStats {
    int pool_blocks = 0;
    int free_blocks = 0;
    int peak_blocks_in_use = 0;
    std::unordered_map<int, int> per_seq_blocks;
};

// Read-only window over one sequence's K/V entries at one layer,
// positions [0, size).
class KvStore;
class KvView {
public:
    std::span<const double> key(int position) const;
    std::span<const double> value(int position) const;
    int size() const { return size_; }

private:
    friend class KvStore;
    KvView(const KvStore* store, int seq_id, int layer, int size)
        : store_(store), seq_id_(seq_id), layer_(layer), size_(size) {}
    const KvStore* store_;
    int seq_id_;
    int layer_;
    int size_;
};

// Block-pooled K/V storage. One block holds up to `block_capacity` positions
// of one (sequence, layer) pair. Slots are write-once and positions fill
// contiguously; commit() checks that every layer holds the new position, so
// a committed sequence always has complete K/V at every layer.
class KvStore {
public:
    KvStore(int d_model, int n_layers, int pool_blocks, int block_capacity = 16);

    // Reserves ceil(capacity_tokens / block_capacity) * n_layers blocks up
    // front. Throws KvOutOfMemory if the pool cannot cover it, duplicate
    // seq_id is an error.
    void allocate(int seq_id, int capacity_tokens);

    // position must equal the written length at (seq, layer): no gaps, no
    // overwrites.
    void append(int seq_id, int layer, int position, const Vector& k, const Vector& v);

    // Entries for positions [0, upto_position). Throws if any are unwritten.
    KvView view(int seq_id, int layer, int upto_position) const;

    // Advances the committed length by one after checking that all layers
    // hold the new position.
    void commit(int seq_id);

    void release(int seq_id);

    bool contains(int seq_id) const;
    int committed_len(int seq_id) const;
    int written_len(int seq_id, int layer) const;
    int free_blocks() const { return static_cast<int>(free_list_.size()); }
    int pool_blocks() const { return pool_blocks_; }
    int d_model() const { return d_model_; }
    int n_layers() const { return n_layers_; }
    KvStats stats() const;

private:
    friend class KvView;

    struct SeqEntry {
        int capacity_tokens = 0;
        int committed = 0;
        std::vector<int> written;                   // per layer
        std::vector<std::vector<int>> block_table;  // per layer, block ids in position order
    };

    const SeqEntry& entry(int seq_id, const char* op) const;
    std::span<const double> slot_k(int block, int offset) const;
    std::span<const double> slot_v(int block, int offset) const;

    int d_model_;
    int n_layers_;
    int pool_blocks_;
    int block_capacity_;
    std::vector<double> k_data_;  // pool_blocks * block_capacity * d_model
    std::vector<double> v_data_;
    std::vector<int> free_list_;
    int peak_in_use_ = 0;
    std::unordered_map<int, SeqEntry> seqs_;
};

struct KvOutOfMemory : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Computes K/V for one layer from a hidden state. Bound to the model's
// per-layer key/value projections by the engine.
using KvPairFn = std::function<std::pair<Vector, Vector>(int layer, const Vector& h)>;

// After a batch exits at `output_layer`, writes K/V for layers
// output_layer+1 .. n_layers at each sequence's current position, projecting
// the exit hidden state directly through each remaining layer (one matrix
// multiplication per projection, no further layer passes). No-op when
// output_layer == n_layers.
void fill_skipped(KvStore& store, const std::vector<std::pair<int, Vector>>& batch,
                  int output_layer, const KvPairFn& kv_fn);

}  // namespace exitlab
