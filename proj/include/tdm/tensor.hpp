#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "tdm/error.hpp"

namespace tdm::ad {

/// Dimension sizes, outermost first. Storage is row-major.
using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

enum class OpKind : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    matmul,
    conv2d_valid,
    maxpool2,
    relu,
    tanh,
    batchnorm1d,
    mean_over_axis,
    max_over_axis,
    sum,
    softmax_over_axis,
    squared_difference,
    // structural and scalar helpers needed to express the models without broadcasting
    pad2d,
    batchnorm2d,
    reshape,
    expand,
    index_select,
    scale,
    add_scalar,
    bias_add,
    channel_scale,
    sqrt,
    div,
    log_clamped,
};

std::string_view to_string(OpKind kind) noexcept;

namespace detail {

struct Node {
    OpKind kind = OpKind::leaf;
    Shape shape;
    Eigen::VectorXd value;
    Eigen::VectorXd grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    /// Gradient buffer, zero-filled on first access.
    Eigen::VectorXd& grad_buffer() {
        if (grad.size() != value.size()) grad = Eigen::VectorXd::Zero(value.size());
        return grad;
    }
};

}  // namespace detail

/// Handle to a node of the (implicit) computation graph. Copies share the node.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor from_values(Shape shape, Eigen::VectorXd data, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), 1.0, requires_grad); }

    /// Fresh leaf holding a copy of the values (handles otherwise share nodes).
    Tensor clone() const { return from_values(shape(), values(), requires_grad()); }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t size() const { return static_cast<std::size_t>(node_->value.size()); }

    const Eigen::VectorXd& values() const { return node_->value; }
    std::span<const double> data() const { return {node_->value.data(), size()}; }
    double operator[](std::size_t i) const { return node_->value[static_cast<Eigen::Index>(i)]; }
    double at(std::initializer_list<std::size_t> index) const;
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    OpKind kind() const { return node_->kind; }
    bool is_leaf() const { return node_->kind == OpKind::leaf; }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    /// Accumulated gradient; zeros when nothing has flowed back yet.
    Eigen::VectorXd grad() const;
    void zero_grad() { node_->grad.resize(0); }

    /// In-place access for optimizers and finite differencing. Leaves only.
    Eigen::VectorXd& mutable_values();

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

inline Tensor tensor_new(Shape shape, std::vector<double> data, bool requires_grad = false) {
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_mode_enabled() noexcept;

/// Topologically ordered view of everything that feeds a tensor and needs a gradient.
class ComputeGraph {
public:
    static ComputeGraph trace(const Tensor& output);

    std::span<const Tensor> nodes() const { return order_; }
    std::size_t size() const { return order_.size(); }

private:
    std::vector<Tensor> order_;
};

/// Reverse-mode sweep from a scalar. Gradients accumulate into leaves that
/// require them; call zero_grad() between independent sweeps.
void backward(const Tensor& output);

/// Central differences of `f` with respect to every element of every tensor
/// in `params`. The tensors must be leaves; they are restored exactly.
std::vector<Eigen::VectorXd> finite_diff_grad(const std::function<double()>& f,
                                              std::span<const Tensor> params, double eps);

namespace detail {

/// Wires a freshly computed value into the graph when recording is on and any
/// input needs a gradient; otherwise returns a plain constant.
Tensor make_result(OpKind kind, Shape shape, Eigen::VectorXd value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward);

}  // namespace detail

}  // namespace tdm::ad
