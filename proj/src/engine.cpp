#include "exitlab/engine.hpp"

#include <algorithm>
#include <cassert>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace exitlab {

double CostModel::check_cost(const ExitTechnique& technique) const {
    switch (technique.kind) {
        case TechniqueKind::softmax_response: return c_check_softmax;
        case TechniqueKind::state_similarity: return c_check_state;
        case TechniqueKind::classifier: return c_check_classifier;
        case TechniqueKind::never:
        case TechniqueKind::always_at: return 0.0;
    }
    throw std::logic_error("check_cost: unreachable");
}

void CostModel::validate() const {
    for (double c : {c_layer_fixed, c_layer_per_seq, c_fill_per_seq_layer, c_check_softmax,
                     c_check_classifier, c_check_state}) {
        if (c < 0.0) throw std::invalid_argument("CostModel: charges must be nonnegative");
    }
}

void EngineConfig::validate() const {
    model.validate();
    schedule.validate();
    costs.validate();
    if (max_batch < 1) throw std::invalid_argument("EngineConfig: max_batch must be >= 1");
    if (pool_blocks < 1) throw std::invalid_argument("EngineConfig: pool_blocks must be >= 1");
    if (block_capacity < 1) throw std::invalid_argument("EngineConfig: block_capacity must be >= 1");
    if (eos_token >= model.vocab_size) {
        throw std::invalid_argument("EngineConfig: eos_token outside vocab");
    }
    if (technique.kind == TechniqueKind::always_at &&
        (technique.exit_layer < 1 || technique.exit_layer > model.n_layers)) {
        throw std::invalid_argument("EngineConfig: always_at layer outside [1, n_layers]");
    }
}

ExitStatusVector::ExitStatusVector(int batch_size)
    : status_(static_cast<size_t>(batch_size), false),
      first_accept_(static_cast<size_t>(batch_size), 0) {
    if (batch_size < 1) {
        throw std::invalid_argument("ExitStatusVector: batch must be nonempty");
    }
}

bool ExitStatusVector::observe_layer(int layer, const std::vector<bool>& accepted) {
    if (accepted.size() != status_.size()) {
        throw std::invalid_argument("ExitStatusVector: accept vector size mismatch");
    }
    for (size_t i = 0; i < status_.size(); ++i) {
        if (!status_[i] && accepted[i]) {
            status_[i] = true;
            first_accept_[i] = layer;
        }
    }
    return all_set();
}

bool ExitStatusVector::all_set() const {
    return std::all_of(status_.begin(), status_.end(), [](bool b) { return b; });
}

int ExitStatusVector::first_accept_layer(int slot, int fallback) const {
    const int fa = first_accept_[static_cast<size_t>(slot)];
    return fa == 0 ? fallback : fa;
}

double Transcript::total_charge() const {
    double sum = 0.0;
    for (const PrefillRecord& p : prefills) sum += p.charge;
    for (const IterationRecord& it : iterations) sum += it.charge;
    return sum;
}

Engine::Engine(EngineConfig config) : config_(std::move(config)) {
    config_.validate();
    weights_ = ModelWeights::seeded(config_.model);
}

Engine::Engine(EngineConfig config, ModelWeights weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
    config_.validate();
    if (weights_.config.n_layers != config_.model.n_layers ||
        weights_.config.d_model != config_.model.d_model ||
        weights_.config.vocab_size != config_.model.vocab_size) {
        throw std::invalid_argument("Engine: weights do not match config.model");
    }
}

namespace {

struct LiveSeq {
    SequenceRecord rec;
    int max_new_tokens = 0;
    int next_input = 0;  // token fed to the next decode iteration
    bool finished = false;
};

}  // namespace

Transcript Engine::run(const Workload& workload) const {
    const int n_layers = config_.model.n_layers;
    const ExitTechnique& technique = config_.technique;

    Workload sorted = workload;
    sorted.validate_and_sort(config_.model.vocab_size);

    Transcript t;
    t.model = config_.model;
    t.technique = technique_name(technique);

    KvStore cache(config_.model.d_model, n_layers, config_.pool_blocks, config_.block_capacity);
    const KvPairFn kv_fn = [this](int layer, const Vector& h) {
        return compute_kv_pair(weights_, layer, h);
    };

    double clock = 0.0;
    size_t next_pending = 0;
    std::vector<LiveSeq> running;

    auto evict_finished = [&]() {
        for (auto it = running.begin(); it != running.end();) {
            if (!it->finished) {
                ++it;
                continue;
            }
            const int id = it->rec.id;
            if (config_.capture_kv) {
                SequenceKvCapture cap;
                const int committed = cache.committed_len(id);
                cap.kv.resize(static_cast<size_t>(n_layers));
                for (int layer = 1; layer <= n_layers; ++layer) {
                    const KvView kv = cache.view(id, layer, committed);
                    auto& per_layer = cap.kv[static_cast<size_t>(layer - 1)];
                    per_layer.resize(static_cast<size_t>(committed));
                    for (int pos = 0; pos < committed; ++pos) {
                        const auto k = kv.key(pos);
                        const auto v = kv.value(pos);
                        per_layer[static_cast<size_t>(pos)].k.assign(k.begin(), k.end());
                        per_layer[static_cast<size_t>(pos)].v.assign(v.begin(), v.end());
                    }
                }
                auto found = t.kv_captures.find(id);
                if (found != t.kv_captures.end()) {
                    cap.exit_states = std::move(found->second.exit_states);
                    found->second = std::move(cap);
                } else {
                    t.kv_captures.emplace(id, std::move(cap));
                }
            }
            cache.release(id);
            t.sequences.push_back(std::move(it->rec));
            it = running.erase(it);
        }
    };

    auto prefill = [&](LiveSeq& seq) {
        const auto& prompt = seq.rec.prompt;
        const int positions = static_cast<int>(prompt.size()) - 1;
        for (int j = 0; j < positions; ++j) {
            Vector h = embed(weights_, prompt[static_cast<size_t>(j)]);
            for (int layer = 1; layer <= n_layers; ++layer) {
                h = std::move(
                    layer_forward(weights_, layer, {{seq.rec.id, std::move(h)}}, cache)[0]);
            }
            cache.commit(seq.rec.id);
        }
        const double charge = static_cast<double>(positions) * n_layers *
                              (config_.costs.c_layer_fixed + config_.costs.c_layer_per_seq);
        clock += charge;
        t.prefills.push_back({clock, charge, seq.rec.id, positions});
    };

    auto admit = [&]() {
        while (next_pending < sorted.requests.size()) {
            const Request& req = sorted.requests[next_pending];
            if (req.arrival_time > clock) break;
            if (static_cast<int>(running.size()) >= config_.max_batch) break;
            const int id = static_cast<int>(next_pending);
            const int need = static_cast<int>(req.prompt.size()) + req.max_new_tokens;
            try {
                cache.allocate(id, need);
            } catch (const KvOutOfMemory&) {
                break;  // strict FIFO: a deferred head blocks later arrivals
            }
            LiveSeq seq;
            seq.rec.id = id;
            seq.rec.arrival_time = req.arrival_time;
            seq.rec.prompt = req.prompt;
            seq.rec.max_new_tokens = req.max_new_tokens;
            seq.max_new_tokens = req.max_new_tokens;
            seq.next_input = req.prompt.back();
            running.push_back(std::move(seq));
            prefill(running.back());
            ++next_pending;
        }
    };

    auto decode_iteration = [&]() {
        const int batch_size = static_cast<int>(running.size());
        if (batch_size == 0) {
            throw std::logic_error("decode_iteration: empty batch");
        }

        // `states` holds each layer's entering state: the embedding output
        // before layer 1 (h_0 for the similarity check), then each layer's
        // output in turn.
        std::vector<std::pair<int, Vector>> states;
        states.reserve(static_cast<size_t>(batch_size));
        for (const LiveSeq& seq : running) {
            states.emplace_back(seq.rec.id, embed(weights_, seq.next_input));
        }

        ExitStatusVector status(batch_size);
        int output_layer = n_layers;
        for (int layer = 1; layer <= n_layers; ++layer) {
            std::vector<Vector> next = layer_forward(weights_, layer, states, cache);
            std::vector<bool> accepted(static_cast<size_t>(batch_size), false);
            const double lambda = threshold_at(config_.schedule, layer);
            for (int b = 0; b < batch_size; ++b) {
                ExitEvidence ev;
                ev.layer = layer;
                Vector logits;
                switch (technique.kind) {
                    case TechniqueKind::softmax_response:
                        logits = lm_head_logits(weights_, next[static_cast<size_t>(b)]);
                        ev.logits = &logits;
                        break;
                    case TechniqueKind::state_similarity:
                        ev.h_prev = &states[static_cast<size_t>(b)].second;
                        ev.h_cur = &next[static_cast<size_t>(b)];
                        break;
                    case TechniqueKind::classifier:
                        ev.h_cur = &next[static_cast<size_t>(b)];
                        ev.probe = &weights_.probe;
                        break;
                    case TechniqueKind::never:
                    case TechniqueKind::always_at:
                        break;
                }
                accepted[static_cast<size_t>(b)] = decide(technique, ev, lambda);
            }
            for (int b = 0; b < batch_size; ++b) {
                states[static_cast<size_t>(b)].second = std::move(next[static_cast<size_t>(b)]);
            }
            if (status.observe_layer(layer, accepted)) {
                output_layer = layer;
                break;
            }
        }

        fill_skipped(cache, states, output_layer, kv_fn);
        for (const LiveSeq& seq : running) {
            cache.commit(seq.rec.id);
        }

        const double charge =
            output_layer * (config_.costs.c_layer_fixed +
                            config_.costs.c_layer_per_seq * batch_size) +
            output_layer * batch_size * config_.costs.check_cost(technique) +
            static_cast<double>(n_layers - output_layer) * batch_size *
                config_.costs.c_fill_per_seq_layer;
        clock += charge;

        IterationRecord rec;
        rec.clock = clock;
        rec.charge = charge;
        rec.output_layer = output_layer;

        int max_accept = 0;
        for (int b = 0; b < batch_size; ++b) {
            LiveSeq& seq = running[static_cast<size_t>(b)];
            const Vector logits = lm_head_logits(weights_, states[static_cast<size_t>(b)].second);
            const int token = greedy_token(logits);
            const int accept_layer = status.first_accept_layer(b, n_layers);
            max_accept = std::max(max_accept, accept_layer);

            rec.batch_ids.push_back(seq.rec.id);
            rec.per_seq.push_back({seq.rec.id, accept_layer, token});

            seq.rec.tokens.push_back(token);
            seq.rec.exit_layers.push_back(accept_layer);
            seq.rec.iter_output_layers.push_back(output_layer);
            if (config_.capture_kv) {
                t.kv_captures[seq.rec.id].exit_states.push_back(states[static_cast<size_t>(b)].second);
            }
            if (seq.rec.tokens.size() == 1) {
                seq.rec.first_token_time = clock;
            }
            const bool hit_eos = config_.eos_token >= 0 && token == config_.eos_token;
            if (hit_eos || static_cast<int>(seq.rec.tokens.size()) >= seq.max_new_tokens) {
                seq.finished = true;
                seq.rec.finish_time = clock;
            } else {
                seq.next_input = token;
            }
        }
        assert(max_accept == output_layer);
        (void)max_accept;
        t.iterations.push_back(std::move(rec));
    };

    for (;;) {
        evict_finished();
        admit();
        if (running.empty()) {
            if (next_pending >= sorted.requests.size()) break;
            const double next_arrival = sorted.requests[next_pending].arrival_time;
            if (next_arrival > clock) {
                t.total_idle += next_arrival - clock;
                clock = next_arrival;
            }
            continue;
        }
        decode_iteration();
    }

    t.cache_stats = cache.stats();
    t.final_clock = clock;
    return t;
}

// ---------------------------------------------------------------------------
// Transcript persistence (JSON lines)
// ---------------------------------------------------------------------------

void write_transcript_jsonl(const Transcript& transcript, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("transcript: cannot open " + path + " for writing");

    nlohmann::ordered_json meta;
    meta["type"] = "meta";
    meta["n_layers"] = transcript.model.n_layers;
    meta["d_model"] = transcript.model.d_model;
    meta["vocab_size"] = transcript.model.vocab_size;
    meta["model_seed"] = transcript.model.seed;
    meta["technique"] = transcript.technique;
    meta["final_clock"] = transcript.final_clock;
    meta["total_idle"] = transcript.total_idle;
    meta["cache"] = {{"pool_blocks", transcript.cache_stats.pool_blocks},
                     {"free_blocks", transcript.cache_stats.free_blocks},
                     {"peak_blocks", transcript.cache_stats.peak_blocks_in_use}};
    out << meta.dump() << "\n";

    for (const PrefillRecord& p : transcript.prefills) {
        nlohmann::ordered_json j;
        j["type"] = "prefill";
        j["clock"] = p.clock;
        j["charge"] = p.charge;
        j["seq_id"] = p.seq_id;
        j["positions"] = p.positions;
        out << j.dump() << "\n";
    }
    for (const IterationRecord& it : transcript.iterations) {
        nlohmann::ordered_json j;
        j["type"] = "iteration";
        j["clock"] = it.clock;
        j["charge"] = it.charge;
        j["batch_ids"] = it.batch_ids;
        j["output_layer"] = it.output_layer;
        nlohmann::ordered_json per = nlohmann::ordered_json::array();
        for (const IterationPerSeq& s : it.per_seq) {
            per.push_back({{"seq_id", s.seq_id}, {"accept_layer", s.accept_layer}, {"token", s.token}});
        }
        j["per_seq"] = std::move(per);
        out << j.dump() << "\n";
    }
    for (const SequenceRecord& s : transcript.sequences) {
        nlohmann::ordered_json j;
        j["type"] = "sequence";
        j["seq_id"] = s.id;
        j["arrival"] = s.arrival_time;
        j["first_token"] = s.first_token_time;
        j["finish"] = s.finish_time;
        j["max_new_tokens"] = s.max_new_tokens;
        j["prompt"] = s.prompt;
        j["tokens"] = s.tokens;
        j["exit_layers"] = s.exit_layers;
        j["iter_output_layers"] = s.iter_output_layers;
        out << j.dump() << "\n";
    }
    if (!out) throw std::runtime_error("transcript: write failed for " + path);
}

Transcript read_transcript_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("transcript: cannot open " + path);
    Transcript t;
    std::string line;
    int line_no = 0;
    bool have_meta = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("transcript: parse error at line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        const std::string type = j.at("type").get<std::string>();
        if (type == "meta") {
            t.model.n_layers = j.at("n_layers").get<int>();
            t.model.d_model = j.at("d_model").get<int>();
            t.model.vocab_size = j.at("vocab_size").get<int>();
            t.model.seed = j.at("model_seed").get<uint64_t>();
            t.technique = j.at("technique").get<std::string>();
            t.final_clock = j.at("final_clock").get<double>();
            t.total_idle = j.at("total_idle").get<double>();
            t.cache_stats.pool_blocks = j.at("cache").at("pool_blocks").get<int>();
            t.cache_stats.free_blocks = j.at("cache").at("free_blocks").get<int>();
            t.cache_stats.peak_blocks_in_use = j.at("cache").at("peak_blocks").get<int>();
            have_meta = true;
        } else if (type == "prefill") {
            PrefillRecord p;
            p.clock = j.at("clock").get<double>();
            p.charge = j.at("charge").get<double>();
            p.seq_id = j.at("seq_id").get<int>();
            p.positions = j.at("positions").get<int>();
            t.prefills.push_back(p);
        } else if (type == "iteration") {
            IterationRecord rec;
            rec.clock = j.at("clock").get<double>();
            rec.charge = j.at("charge").get<double>();
            rec.batch_ids = j.at("batch_ids").get<std::vector<int>>();
            rec.output_layer = j.at("output_layer").get<int>();
            for (const auto& s : j.at("per_seq")) {
                rec.per_seq.push_back({s.at("seq_id").get<int>(), s.at("accept_layer").get<int>(),
                                       s.at("token").get<int>()});
            }
            t.iterations.push_back(std::move(rec));
        } else if (type == "sequence") {
            SequenceRecord s;
            s.id = j.at("seq_id").get<int>();
            s.arrival_time = j.at("arrival").get<double>();
            s.first_token_time = j.at("first_token").get<double>();
            s.finish_time = j.at("finish").get<double>();
            s.max_new_tokens = j.at("max_new_tokens").get<int>();
            s.prompt = j.at("prompt").get<std::vector<int>>();
            s.tokens = j.at("tokens").get<std::vector<int>>();
            s.exit_layers = j.at("exit_layers").get<std::vector<int>>();
            s.iter_output_layers = j.at("iter_output_layers").get<std::vector<int>>();
            t.sequences.push_back(std::move(s));
        } else {
            throw std::runtime_error("transcript: unknown record type '" + type + "' at line " +
                                     std::to_string(line_no));
        }
    }
    if (!have_meta) throw std::runtime_error("transcript: missing meta record in " + path);
    return t;
}

}  // namespace exitlab
