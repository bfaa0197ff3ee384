#include "adalink/tensor/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "adalink/errors.hpp"

namespace adalink::tensor {

namespace {

double evaluate(const std::function<Tensor()> &f) {
    Tensor out = f();
    if (out.size() != 1) throw ContractError("grad_check: f must return a scalar, got " + shape_str(out.shape()));
    return out.item();
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()> &f, std::span<Tensor> params, double h) {
    if (!(h > 0.0)) throw ContractError("grad_check: step must be positive");
    for (auto &p : params) {
        p.set_requires_grad(true);
        p.clear_grad();
    }
    Tensor out = f();
    if (out.size() != 1) throw ContractError("grad_check: f must return a scalar, got " + shape_str(out.shape()));
    out.backward();

    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor &p = params[pi];
        std::vector<double> analytic(p.size(), 0.0);
        if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
        auto values = p.mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double up = evaluate(f);
            values[i] = saved - h;
            const double down = evaluate(f);
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double err =
                std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
            ++result.entries_checked;
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_param = pi;
                result.worst_index = i;
                result.worst_autodiff = analytic[i];
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

}  // namespace adalink::tensor
