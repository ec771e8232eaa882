#pragma once

#include <string>

#include "exitlab/model.hpp"
#include "exitlab/numerics.hpp"

namespace exitlab {

// The confidence measures and the threshold schedule: pure decision
// functions from per-layer evidence to accept/reject. `never` and
// `always_at` are harness policies for baselines and forced-exit tests.

enum class TechniqueKind {
    softmax_response,
    state_similarity,
    classifier,
    never,
    always_at,
};

struct ExitTechnique {
    TechniqueKind kind = TechniqueKind::never;
    int exit_layer = 1;  // only for always_at

    static ExitTechnique softmax_response() { return {TechniqueKind::softmax_response, 1}; }
    static ExitTechnique state_similarity() { return {TechniqueKind::state_similarity, 1}; }
    static ExitTechnique classifier() { return {TechniqueKind::classifier, 1}; }
    static ExitTechnique never() { return {TechniqueKind::never, 1}; }
    static ExitTechnique always_at(int layer) { return {TechniqueKind::always_at, layer}; }
};

std::string technique_name(const ExitTechnique& t);
ExitTechnique technique_from_name(const std::string& name);  // accepts "always-at=K"

// Geometric decay with a floor: max(lambda_min, lambda0 * gamma^(i-1)).
// gamma = 1 gives a constant threshold.
struct ThresholdSchedule {
    double lambda0 = 0.85;
    double gamma = 1.0;       // in (0, 1]
    double lambda_min = 0.0;  // >= 0, <= lambda0

    void validate() const;
};

double threshold_at(const ThresholdSchedule& schedule, int layer);

// Gap between the top two softmax probabilities of the logits.
double softmax_response_confidence(const Vector& logits);

// Cosine similarity of consecutive hidden states.
double state_similarity_confidence(const Vector& h_prev, const Vector& h_cur);

// sigmoid(w.h + b) for a linear probe.
double classifier_confidence(const Vector& h, const ClassifierProbe& probe);

// Evidence for one (sequence, layer) decision; only the fields the technique
// needs have to be set.
struct ExitEvidence {
    const Vector* logits = nullptr;   // softmax_response
    const Vector* h_prev = nullptr;   // state_similarity
    const Vector* h_cur = nullptr;    // state_similarity, classifier
    const ClassifierProbe* probe = nullptr;  // classifier
    int layer = 0;                    // always_at
};

// Strict comparison: confidence > lambda. `never` rejects everywhere,
// `always_at(k)` accepts from layer k on. Throws if the technique's
// evidence is missing.
bool decide(const ExitTechnique& technique, const ExitEvidence& evidence, double lambda);

}  // namespace exitlab
