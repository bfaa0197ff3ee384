#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace adalink::tensor {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape &shape);
std::string shape_str(const Shape &shape);

class Tensor;

namespace detail {

// One recorded operation. A node owns its forward value, an optional
// gradient buffer, and the rule that pushes its gradient into its parents.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node &)> backward;

    void accumulate(std::span<const double> g);
    std::vector<double> &grad_buffer();
};

}  // namespace detail

// Dense row-major tensor of doubles with reverse-mode differentiation.
//
// A Tensor is a cheap handle; copies share the underlying node. Use clone()
// for an independent leaf with the same values.
class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape &shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;

    std::span<const double> data() const;
    // Mutating values of a tensor that already participates in a recorded
    // graph invalidates that graph. Intended for parameters between steps.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t row, std::size_t col) const;

    bool requires_grad() const;
    void set_requires_grad(bool value);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();
    void clear_grad();

    // Reverse sweep from a scalar. Each reachable node that requires grad is
    // visited exactly once, in reverse topological order.
    void backward() const;

    // Same values, no history, no grad.
    Tensor detach() const;
    // Independent leaf copy; keeps the requires_grad flag.
    Tensor clone() const;

    bool same_node(const Tensor &other) const { return node_ == other.node_; }

    // Construction hook for operations.
    static Tensor from_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                          std::function<void(detail::Node &)> backward);
    static std::vector<double> *grad_of(detail::Node &parent);

   private:
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

}  // namespace adalink::tensor
