#include "exitlab/exit_policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace exitlab {

std::string technique_name(const ExitTechnique& t) {
    switch (t.kind) {
        case TechniqueKind::softmax_response: return "softmax";
        case TechniqueKind::state_similarity: return "state";
        case TechniqueKind::classifier: return "classifier";
        case TechniqueKind::never: return "never";
        case TechniqueKind::always_at: return "always-at=" + std::to_string(t.exit_layer);
    }
    throw std::logic_error("technique_name: unreachable");
}

ExitTechnique technique_from_name(const std::string& name) {
    if (name == "softmax") return ExitTechnique::softmax_response();
    if (name == "state") return ExitTechnique::state_similarity();
    if (name == "classifier") return ExitTechnique::classifier();
    if (name == "never") return ExitTechnique::never();
    if (name.rfind("always-at=", 0) == 0) {
        const std::string arg = name.substr(10);
        if (arg.empty() || arg.find_first_not_of("0123456789") != std::string::npos) {
            throw std::invalid_argument("technique: bad layer in '" + name + "'");
        }
        const int layer = std::stoi(arg);
        if (layer < 1) throw std::invalid_argument("technique: always-at layer must be >= 1");
        return ExitTechnique::always_at(layer);
    }
    throw std::invalid_argument("technique: unknown name '" + name +
                                "' (expected softmax|state|classifier|never|always-at=K)");
}

void ThresholdSchedule::validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) {
        throw std::invalid_argument("ThresholdSchedule: gamma must be in (0, 1]");
    }
    if (lambda_min < 0.0) {
        throw std::invalid_argument("ThresholdSchedule: lambda_min must be >= 0");
    }
    if (lambda_min > lambda0) {
        throw std::invalid_argument("ThresholdSchedule: lambda_min must be <= lambda0");
    }
}

double threshold_at(const ThresholdSchedule& schedule, int layer) {
    if (layer < 1) {
        throw std::invalid_argument("threshold_at: layer must be >= 1");
    }
    return std::max(schedule.lambda_min, schedule.lambda0 * std::pow(schedule.gamma, layer - 1));
}

double softmax_response_confidence(const Vector& logits) {
    if (logits.size() < 2) {
        throw std::invalid_argument("softmax_response_confidence: need at least 2 logits");
    }
    const Vector p = softmax(logits);
    double top1 = -1.0, top2 = -1.0;
    for (double x : p) {
        if (x > top1) {
            top2 = top1;
            top1 = x;
        } else if (x > top2) {
            top2 = x;
        }
    }
    return top1 - top2;
}

double state_similarity_confidence(const Vector& h_prev, const Vector& h_cur) {
    return cosine_similarity(h_prev, h_cur);
}

double classifier_confidence(const Vector& h, const ClassifierProbe& probe) {
    if (h.size() != probe.w.size()) {
        throw std::invalid_argument("classifier_confidence: state length does not match probe");
    }
    double z = probe.b;
    for (size_t i = 0; i < h.size(); ++i) {
        z += probe.w[i] * h[i];
    }
    return 1.0 / (1.0 + std::exp(-z));
}

bool decide(const ExitTechnique& technique, const ExitEvidence& evidence, double lambda) {
    switch (technique.kind) {
        case TechniqueKind::never:
            return false;
        case TechniqueKind::always_at:
            if (evidence.layer < 1) {
                throw std::invalid_argument("decide: always_at needs the current layer");
            }
            return evidence.layer >= technique.exit_layer;
        case TechniqueKind::softmax_response:
            if (evidence.logits == nullptr) {
                throw std::invalid_argument("decide: softmax_response needs logits");
            }
            return softmax_response_confidence(*evidence.logits) > lambda;
        case TechniqueKind::state_similarity:
            if (evidence.h_prev == nullptr || evidence.h_cur == nullptr) {
                throw std::invalid_argument("decide: state_similarity needs both hidden states");
            }
            return state_similarity_confidence(*evidence.h_prev, *evidence.h_cur) > lambda;
        case TechniqueKind::classifier:
            if (evidence.h_cur == nullptr || evidence.probe == nullptr) {
                throw std::invalid_argument("decide: classifier needs a state and a probe");
            }
            return classifier_confidence(*evidence.h_cur, *evidence.probe) > lambda;
    }
    throw std::logic_error("decide: unreachable");
}

}  // namespace exitlab
