#pragma once

#include <span>
#include <vector>

namespace adalink::tasks {

// Drops pads and everything from the first eos on.
std::vector<int> strip(std::span<const int> tokens);

// 1 when the stripped sequences are equal, else 0. Two empty sequences match.
int exact_match(std::span<const int> pred, std::span<const int> gold);

// Fraction of gold positions where pred has the same token. An empty gold
// scores 1 against an empty pred and 0 otherwise.
double token_accuracy(std::span<const int> pred, std::span<const int> gold);

struct Scores {
    double exact_match = 0.0;
    double token_accuracy = 0.0;
    std::size_t count = 0;
};

// Mean scores over paired prediction and gold lists.
Scores score(const std::vector<std::vector<int>> &preds, const std::vector<std::vector<int>> &golds);

}  // namespace adalink::tasks
