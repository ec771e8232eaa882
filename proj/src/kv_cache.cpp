#include "exitlab/kv_cache.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace exitlab {

namespace {

std::string slot_str(int seq, int layer, int pos) {
    return "(seq " + std::to_string(seq) + ", layer " + std::to_string(layer) + ", position " +
           std::to_string(pos) + ")";
}

}  // namespace

std::span<const double> KvView::key(int position) const {
    if (position < 0 || position >= size_) {
        throw std::out_of_range("KvView::key: position " + std::to_string(position) +
                                " outside [0, " + std::to_string(size_) + ")");
    }
    const auto& e = store_->entry(seq_id_, "view");
    const int block = e.block_table[static_cast<size_t>(layer_ - 1)]
                                   [static_cast<size_t>(position / store_->block_capacity_)];
    return store_->slot_k(block, position % store_->block_capacity_);
}

std::span<const double> KvView::value(int position) const {
    if (position < 0 || position >= size_) {
        throw std::out_of_range("KvView::value: position " + std::to_string(position) +
                                " outside [0, " + std::to_string(size_) + ")");
    }
    const auto& e = store_->entry(seq_id_, "view");
    const int block = e.block_table[static_cast<size_t>(layer_ - 1)]
                                   [static_cast<size_t>(position / store_->block_capacity_)];
    return store_->slot_v(block, position % store_->block_capacity_);
}

KvStore::KvStore(int d_model, int n_layers, int pool_blocks, int block_capacity)
    : d_model_(d_model),
      n_layers_(n_layers),
      pool_blocks_(pool_blocks),
      block_capacity_(block_capacity) {
    if (d_model <= 0 || n_layers <= 0 || pool_blocks <= 0 || block_capacity <= 0) {
        throw std::invalid_argument("KvStore: all constructor parameters must be positive");
    }
    const size_t slot_doubles =
        static_cast<size_t>(pool_blocks) * block_capacity * static_cast<size_t>(d_model);
    k_data_.assign(slot_doubles, 0.0);
    v_data_.assign(slot_doubles, 0.0);
    free_list_.reserve(static_cast<size_t>(pool_blocks));
    for (int b = pool_blocks - 1; b >= 0; --b) {
        free_list_.push_back(b);
    }
}

const KvStore::SeqEntry& KvStore::entry(int seq_id, const char* op) const {
    auto it = seqs_.find(seq_id);
    if (it == seqs_.end()) {
        throw std::invalid_argument(std::string(op) + ": unknown seq_id " + std::to_string(seq_id));
    }
    return it->second;
}

std::span<const double> KvStore::slot_k(int block, int offset) const {
    const size_t base =
        (static_cast<size_t>(block) * block_capacity_ + offset) * static_cast<size_t>(d_model_);
    return {k_data_.data() + base, static_cast<size_t>(d_model_)};
}

std::span<const double> KvStore::slot_v(int block, int offset) const {
    const size_t base =
        (static_cast<size_t>(block) * block_capacity_ + offset) * static_cast<size_t>(d_model_);
    return {v_data_.data() + base, static_cast<size_t>(d_model_)};
}

void KvStore::allocate(int seq_id, int capacity_tokens) {
    if (seqs_.count(seq_id)) {
        throw std::invalid_argument("allocate: seq_id " + std::to_string(seq_id) +
                                    " already allocated");
    }
    if (capacity_tokens < 0) {
        throw std::invalid_argument("allocate: negative capacity");
    }
    const int blocks_per_layer = (capacity_tokens + block_capacity_ - 1) / block_capacity_;
    const size_t need = static_cast<size_t>(blocks_per_layer) * n_layers_;
    if (need > free_list_.size()) {
        throw KvOutOfMemory("allocate: need " + std::to_string(need) + " blocks, " +
                            std::to_string(free_list_.size()) + " free");
    }
    SeqEntry e;
    e.capacity_tokens = blocks_per_layer * block_capacity_;
    e.written.assign(static_cast<size_t>(n_layers_), 0);
    e.block_table.resize(static_cast<size_t>(n_layers_));
    for (int layer = 0; layer < n_layers_; ++layer) {
        auto& table = e.block_table[static_cast<size_t>(layer)];
        table.reserve(static_cast<size_t>(blocks_per_layer));
        for (int b = 0; b < blocks_per_layer; ++b) {
            table.push_back(free_list_.back());
            free_list_.pop_back();
        }
    }
    seqs_.emplace(seq_id, std::move(e));
    peak_in_use_ = std::max(peak_in_use_, pool_blocks_ - static_cast<int>(free_list_.size()));
}

void KvStore::append(int seq_id, int layer, int position, const Vector& k, const Vector& v) {
    auto it = seqs_.find(seq_id);
    if (it == seqs_.end()) {
        throw std::invalid_argument("append: unknown seq_id " + std::to_string(seq_id));
    }
    if (layer < 1 || layer > n_layers_) {
        throw std::invalid_argument("append: layer " + std::to_string(layer) + " outside [1, " +
                                    std::to_string(n_layers_) + "]");
    }
    if (k.size() != static_cast<size_t>(d_model_) || v.size() != static_cast<size_t>(d_model_)) {
        throw std::invalid_argument("append: K/V length does not match d_model");
    }
    SeqEntry& e = it->second;
    int& written = e.written[static_cast<size_t>(layer - 1)];
    if (position < written) {
        throw std::runtime_error("append: slot already written at " +
                                 slot_str(seq_id, layer, position));
    }
    if (position > written) {
        throw std::runtime_error("append: position gap at " + slot_str(seq_id, layer, position) +
                                 ", next unwritten is " + std::to_string(written));
    }
    if (position >= e.capacity_tokens) {
        throw KvOutOfMemory("append: position " + std::to_string(position) +
                            " exceeds reserved capacity " + std::to_string(e.capacity_tokens) +
                            " for seq " + std::to_string(seq_id));
    }
    const int block = e.block_table[static_cast<size_t>(layer - 1)]
                                   [static_cast<size_t>(position / block_capacity_)];
    const int offset = position % block_capacity_;
    const size_t base =
        (static_cast<size_t>(block) * block_capacity_ + offset) * static_cast<size_t>(d_model_);
    for (int i = 0; i < d_model_; ++i) {
        k_data_[base + i] = k[static_cast<size_t>(i)];
        v_data_[base + i] = v[static_cast<size_t>(i)];
    }
    ++written;
}

KvView KvStore::view(int seq_id, int layer, int upto_position) const {
    const SeqEntry& e = entry(seq_id, "view");
    if (layer < 1 || layer > n_layers_) {
        throw std::invalid_argument("view: layer " + std::to_string(layer) + " outside [1, " +
                                    std::to_string(n_layers_) + "]");
    }
    if (upto_position < 0) {
        throw std::invalid_argument("view: negative upto_position");
    }
    if (upto_position > e.written[static_cast<size_t>(layer - 1)]) {
        throw std::runtime_error("view: entries missing at (seq " + std::to_string(seq_id) +
                                 ", layer " + std::to_string(layer) + "): requested " +
                                 std::to_string(upto_position) + ", written " +
                                 std::to_string(e.written[static_cast<size_t>(layer - 1)]));
    }
    return KvView(this, seq_id, layer, upto_position);
}

void KvStore::commit(int seq_id) {
    auto it = seqs_.find(seq_id);
    if (it == seqs_.end()) {
        throw std::invalid_argument("commit: unknown seq_id " + std::to_string(seq_id));
    }
    SeqEntry& e = it->second;
    for (int layer = 1; layer <= n_layers_; ++layer) {
        if (e.written[static_cast<size_t>(layer - 1)] != e.committed + 1) {
            throw std::runtime_error("commit: layer " + std::to_string(layer) + " of seq " +
                                     std::to_string(seq_id) + " has " +
                                     std::to_string(e.written[static_cast<size_t>(layer - 1)]) +
                                     " entries, expected " + std::to_string(e.committed + 1));
        }
    }
    ++e.committed;
}

void KvStore::release(int seq_id) {
    auto it = seqs_.find(seq_id);
    if (it == seqs_.end()) {
        throw std::invalid_argument("release: unknown or already released seq_id " +
                                    std::to_string(seq_id));
    }
    for (const auto& table : it->second.block_table) {
        for (int b : table) {
            free_list_.push_back(b);
        }
    }
    seqs_.erase(it);
}

bool KvStore::contains(int seq_id) const { return seqs_.count(seq_id) != 0; }

int KvStore::committed_len(int seq_id) const { return entry(seq_id, "committed_len").committed; }

int KvStore::written_len(int seq_id, int layer) const {
    if (layer < 1 || layer > n_layers_) {
        throw std::invalid_argument("written_len: layer out of range");
    }
    return entry(seq_id, "written_len").written[static_cast<size_t>(layer - 1)];
}

KvStats KvStore::stats() const {
    KvStats s;
    s.pool_blocks = pool_blocks_;
    s.free_blocks = static_cast<int>(free_list_.size());
    s.peak_blocks_in_use = peak_in_use_;
    for (const auto& [id, e] : seqs_) {
        int n = 0;
        for (const auto& table : e.block_table) {
            n += static_cast<int>(table.size());
        }
        s.per_seq_blocks[id] = n;
    }
    return s;
}

void fill_skipped(KvStore& store, const std::vector<std::pair<int, Vector>>& batch,
                  int output_layer, const KvPairFn& kv_fn) {
    if (output_layer < 1 || output_layer > store.n_layers()) {
        throw std::invalid_argument("fill_skipped: output_layer out of range");
    }
    for (const auto& [seq_id, h_exit] : batch) {
        const int position = store.committed_len(seq_id);
        for (int layer = output_layer + 1; layer <= store.n_layers(); ++layer) {
            auto [k, v] = kv_fn(layer, h_exit);
            store.append(seq_id, layer, position, k, v);
        }
    }
}

}  // namespace exitlab
