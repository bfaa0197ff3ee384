#pragma once

#include <functional>
#include <span>

#include "adalink/tensor/tensor.hpp"

namespace adalink::tensor {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double worst_autodiff = 0.0;
    double worst_numeric = 0.0;
    std::size_t entries_checked = 0;
};

// Compares reverse-mode gradients of a scalar function against central
// differences with step h. Per entry the error is
//   |autodiff - numeric| / max(1e-8, |autodiff| + |numeric|)
// and the maximum over all entries of all params is reported. `params` must
// be leaves that `f` reads; their values are restored afterwards.
GradCheckResult grad_check(const std::function<Tensor()> &f, std::span<Tensor> params, double h = 1e-5);

}  // namespace adalink::tensor
