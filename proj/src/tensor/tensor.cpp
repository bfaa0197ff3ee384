#include "adalink/tensor/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "adalink/errors.hpp"

namespace adalink::tensor {

std::size_t numel(const Shape &shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

std::vector<double> &Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

void Node::accumulate(std::span<const double> g) {
    auto &buf = grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

}  // namespace detail

namespace {

void check_shape(const Shape &shape) {
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

}  // namespace

Tensor::Tensor(Shape shape, bool requires_grad)
    : Tensor(shape, std::vector<double>(numel(shape), 0.0), requires_grad) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape);
    if (numel(shape) != data.size()) {
        throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return Tensor(std::move(shape), requires_grad); }

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape &Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(node_->shape));
    }
    return node_->shape[axis];
}

std::size_t Tensor::size() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    const auto &s = shape();
    if (s.size() != 2 || row >= s[0] || col >= s[1]) {
        throw DimensionError("at(" + std::to_string(row) + "," + std::to_string(col) + ") on " + shape_str(s));
    }
    return node_->data[row * s[1] + col];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
    node_->requires_grad = value;
    if (!value) node_->grad.clear();
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::clear_grad() { node_->grad.clear(); }

void Tensor::backward() const {
    if (size() != 1) throw ContractError("backward() requires a scalar, got " + shape_str(shape()));
    if (!node_->requires_grad) return;

    // Iterative post-order DFS; `order` ends up topologically sorted.
    std::vector<detail::Node *> order;
    std::unordered_set<detail::Node *> seen;
    std::vector<std::pair<detail::Node *, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto &[node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node *parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node *node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

Tensor Tensor::clone() const { return Tensor(shape(), node_->data, node_->requires_grad); }

Tensor Tensor::from_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                       std::function<void(detail::Node &)> backward) {
    Tensor out(std::move(shape), std::move(data), false);
    bool any = false;
    for (const auto &in : inputs) any = any || in.requires_grad();
    if (any) {
        out.node_->requires_grad = true;
        out.node_->parents.reserve(inputs.size());
        for (auto &in : inputs) out.node_->parents.push_back(in.node_);
        out.node_->backward = std::move(backward);
    }
    return out;
}

std::vector<double> *Tensor::grad_of(detail::Node &parent) {
    if (!parent.requires_grad) return nullptr;
    return &parent.grad_buffer();
}

}  // namespace adalink::tensor
