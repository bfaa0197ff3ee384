#include "adalink/training/optimizer.hpp"

#include <cmath>
#include <sstream>

#include "adalink/errors.hpp"

namespace adalink::training {

using tensor::Tensor;

namespace {

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace

std::map<std::string, std::string> AdafactorConfig::to_map() const {
    return {
        {"adafactor.decay_exponent", format_double(decay_exponent)},
        {"adafactor.eps1", format_double(eps1)},
        {"adafactor.eps2", format_double(eps2)},
        {"adafactor.clip_threshold", format_double(clip_threshold)},
        {"adafactor.momentum", "none"},
        {"adafactor.relative_step", "off"},
    };
}

void check_finite_gradients(std::span<const NamedTensor> params) {
    for (const auto &p : params) {
        if (!p.tensor.has_grad()) continue;
        const auto g = p.tensor.grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i])) {
                throw TrainingError("non-finite gradient in parameter '" + p.name + "' at index " +
                                    std::to_string(i));
            }
        }
    }
}

void Adafactor::step(std::span<const NamedTensor> params, double lr) {
    check_finite_gradients(params);
    ++t_;
    const double beta2 = 1.0 - std::pow(static_cast<double>(t_), -config_.decay_exponent);
    std::vector<double> g2, update;
    for (const auto &p : params) {
        Tensor param = p.tensor;
        const std::size_t n = param.size();
        g2.assign(n, 0.0);
        if (param.has_grad()) {
            const auto g = param.grad();
            for (std::size_t i = 0; i < n; ++i) g2[i] = g[i] * g[i] + config_.eps1;
        } else {
            for (auto &v : g2) v = config_.eps1;
        }
        Slot &slot = slots_[p.name];
        update.assign(n, 0.0);
        const auto grad = param.has_grad() ? param.grad() : std::span<const double>();
        auto grad_at = [&](std::size_t i) { return grad.empty() ? 0.0 : grad[i]; };

        if (param.rank() == 2 && param.dim(0) > 1 && param.dim(1) > 1) {
            const std::size_t rows = param.dim(0), cols = param.dim(1);
            if (slot.row.empty()) {
                slot.row.assign(rows, 0.0);
                slot.col.assign(cols, 0.0);
            }
            std::vector<double> row_mean(rows, 0.0), col_mean(cols, 0.0);
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) {
                    row_mean[i] += g2[i * cols + j];
                    col_mean[j] += g2[i * cols + j];
                }
            }
            for (std::size_t i = 0; i < rows; ++i) {
                slot.row[i] = beta2 * slot.row[i] + (1.0 - beta2) * row_mean[i] / static_cast<double>(cols);
            }
            for (std::size_t j = 0; j < cols; ++j) {
                slot.col[j] = beta2 * slot.col[j] + (1.0 - beta2) * col_mean[j] / static_cast<double>(rows);
            }
            double row_avg = 0.0;
            for (double r : slot.row) row_avg += r;
            row_avg /= static_cast<double>(rows);
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) {
                    const double v = slot.row[i] * slot.col[j] / row_avg;
                    update[i * cols + j] = grad_at(i * cols + j) / std::sqrt(v);
                }
            }
        } else {
            if (slot.full.empty()) slot.full.assign(n, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                slot.full[i] = beta2 * slot.full[i] + (1.0 - beta2) * g2[i];
                update[i] = grad_at(i) / std::sqrt(slot.full[i]);
            }
        }

        double ms = 0.0;
        for (double u : update) ms += u * u;
        const double rms = std::sqrt(ms / static_cast<double>(n));
        const double denom = std::max(1.0, rms / config_.clip_threshold);
        auto data = param.mutable_data();
        for (std::size_t i = 0; i < n; ++i) data[i] -= lr * (update[i] / denom);
    }
}

void sgd_step(std::span<const NamedTensor> params, double lr) {
    check_finite_gradients(params);
    for (const auto &p : params) {
        if (!p.tensor.has_grad()) continue;
        Tensor param = p.tensor;
        const auto g = param.grad();
        auto data = param.mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) data[i] -= lr * g[i];
    }
}

}  // namespace adalink::training
