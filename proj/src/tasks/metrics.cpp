#include "adalink/tasks/metrics.hpp"

#include <algorithm>

#include "adalink/errors.hpp"
#include "adalink/model/config.hpp"

namespace adalink::tasks {

std::vector<int> strip(std::span<const int> tokens) {
    std::vector<int> out;
    for (int t : tokens) {
        if (t == model::kEos) break;
        if (t != model::kPad) out.push_back(t);
    }
    return out;
}

int exact_match(std::span<const int> pred, std::span<const int> gold) { return strip(pred) == strip(gold) ? 1 : 0; }

double token_accuracy(std::span<const int> pred, std::span<const int> gold) {
    const auto p = strip(pred);
    const auto g = strip(gold);
    if (g.empty()) return p.empty() ? 1.0 : 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (i < p.size() && p[i] == g[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(g.size());
}

Scores score(const std::vector<std::vector<int>> &preds, const std::vector<std::vector<int>> &golds) {
    if (preds.size() != golds.size()) {
        throw DimensionError("score: " + std::to_string(preds.size()) + " predictions for " +
                             std::to_string(golds.size()) + " references");
    }
    Scores s;
    s.count = preds.size();
    for (std::size_t i = 0; i < preds.size(); ++i) {
        s.exact_match += exact_match(preds[i], golds[i]);
        s.token_accuracy += token_accuracy(preds[i], golds[i]);
    }
    if (s.count) {
        s.exact_match /= static_cast<double>(s.count);
        s.token_accuracy /= static_cast<double>(s.count);
    }
    return s;
}

}  // namespace adalink::tasks
