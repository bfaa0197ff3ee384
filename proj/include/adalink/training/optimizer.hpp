#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "adalink/tensor/tensor.hpp"

namespace adalink::training {

using tensor::NamedTensor;

struct AdafactorConfig {
    // Second-moment decay 1 - t^(-decay_exponent).
    double decay_exponent = 0.8;
    double eps1 = 1e-30;
    // Only used with parameter-scale step sizing, which is off here.
    double eps2 = 1e-3;
    double clip_threshold = 1.0;

    std::map<std::string, std::string> to_map() const;
};

// Adafactor without momentum and without relative step sizing: the caller
// supplies the learning rate. Matrices keep factored row/column second
// moments, everything else a full accumulator.
class Adafactor {
   public:
    explicit Adafactor(AdafactorConfig config = {}) : config_(config) {}

    // Updates every tensor in `params` from its gradient (a missing gradient
    // counts as zero). A non-finite gradient aborts before any change with a
    // TrainingError naming the parameter.
    void step(std::span<const NamedTensor> params, double lr);

    std::size_t steps() const { return t_; }
    const AdafactorConfig &config() const { return config_; }

    struct Slot {
        std::vector<double> row;   // matrices: per-row mean of g²
        std::vector<double> col;   // matrices: per-column mean of g²
        std::vector<double> full;  // vectors
    };
    const Slot &slot(const std::string &name) const { return slots_.at(name); }

   private:
    AdafactorConfig config_;
    std::size_t t_ = 0;
    std::map<std::string, Slot> slots_;
};

// Plain gradient descent, for debugging.
void sgd_step(std::span<const NamedTensor> params, double lr);

// Throws TrainingError if any gradient entry is NaN or infinite.
void check_finite_gradients(std::span<const NamedTensor> params);

}  // namespace adalink::training
