#include "tdm/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace tdm {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::shape_mismatch: return "ShapeMismatch";
        case ErrorCode::unsupported_kind: return "UnsupportedKind";
        case ErrorCode::not_scalar: return "NotScalar";
        case ErrorCode::disconnected_graph: return "DisconnectedGraph";
        case ErrorCode::non_finite_value: return "NonFiniteValue";
        case ErrorCode::invalid_spec: return "InvalidSpec";
        case ErrorCode::insufficient_classes: return "InsufficientClasses";
        case ErrorCode::insufficient_images: return "InsufficientImages";
        case ErrorCode::degenerate_partition: return "DegeneratePartition";
        case ErrorCode::invalid_plan: return "InvalidPlan";
        case ErrorCode::empty_support: return "EmptySupport";
        case ErrorCode::single_class: return "SingleClass";
        case ErrorCode::zero_vector: return "ZeroVector";
        case ErrorCode::label_out_of_range: return "LabelOutOfRange";
        case ErrorCode::non_finite_loss: return "NonFiniteLoss";
        case ErrorCode::insufficient_instances: return "InsufficientInstances";
        case ErrorCode::insufficient_samples: return "InsufficientSamples";
        case ErrorCode::bad_magic: return "BadMagic";
        case ErrorCode::unsupported_version: return "UnsupportedVersion";
        case ErrorCode::manifest_mismatch: return "ManifestMismatch";
        case ErrorCode::truncated_payload: return "TruncatedPayload";
        case ErrorCode::tolerance_exceeded: return "ToleranceExceeded";
        case ErrorCode::invalid_config: return "InvalidConfig";
        case ErrorCode::io_error: return "IoError";
    }
    return "Unknown";
}

}  // namespace tdm

namespace tdm::ad {

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_leaf(Shape shape, Eigen::VectorXd data, bool requires_grad) {
    for (auto d : shape) require(d >= 1, ErrorCode::shape_mismatch, "zero-sized dimension in " + shape_string(shape));
    require(numel(shape) == static_cast<std::size_t>(data.size()), ErrorCode::shape_mismatch,
            "shape " + shape_string(shape) + " needs " + std::to_string(numel(shape)) + " values, got " +
                std::to_string(data.size()));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return node;
}

}  // namespace

std::size_t numel(const Shape& shape) noexcept {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::string_view to_string(OpKind kind) noexcept {
    switch (kind) {
        case OpKind::leaf: return "leaf";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::matmul: return "matmul";
        case OpKind::conv2d_valid: return "conv2d_valid";
        case OpKind::maxpool2: return "maxpool2";
        case OpKind::relu: return "relu";
        case OpKind::tanh: return "tanh";
        case OpKind::batchnorm1d: return "batchnorm1d";
        case OpKind::mean_over_axis: return "mean_over_axis";
        case OpKind::max_over_axis: return "max_over_axis";
        case OpKind::sum: return "sum";
        case OpKind::softmax_over_axis: return "softmax_over_axis";
        case OpKind::squared_difference: return "squared_difference";
        case OpKind::pad2d: return "pad2d";
        case OpKind::batchnorm2d: return "batchnorm2d";
        case OpKind::reshape: return "reshape";
        case OpKind::expand: return "expand";
        case OpKind::index_select: return "index_select";
        case OpKind::scale: return "scale";
        case OpKind::add_scalar: return "add_scalar";
        case OpKind::bias_add: return "bias_add";
        case OpKind::channel_scale: return "channel_scale";
        case OpKind::sqrt: return "sqrt";
        case OpKind::div: return "div";
        case OpKind::log_clamped: return "log_clamped";
    }
    return "unknown";
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(make_leaf(std::move(shape), Eigen::Map<const Eigen::VectorXd>(data.data(), static_cast<Eigen::Index>(data.size())),
                      requires_grad)) {}

Tensor Tensor::from_values(Shape shape, Eigen::VectorXd data, bool requires_grad) {
    return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = static_cast<Eigen::Index>(numel(shape));
    return from_values(std::move(shape), Eigen::VectorXd::Constant(n, value), requires_grad);
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    require(index.size() == rank(), ErrorCode::shape_mismatch, "index rank differs from tensor rank");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        require(i < node_->shape[axis], ErrorCode::shape_mismatch, "index out of range");
        flat = flat * node_->shape[axis] + i;
        ++axis;
    }
    return node_->value[static_cast<Eigen::Index>(flat)];
}

double Tensor::item() const {
    require(size() == 1, ErrorCode::not_scalar, "item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
}

Eigen::VectorXd Tensor::grad() const {
    if (has_grad()) return node_->grad;
    return Eigen::VectorXd::Zero(node_->value.size());
}

Eigen::VectorXd& Tensor::mutable_values() {
    require(is_leaf(), ErrorCode::unsupported_kind, "only leaf tensors may be modified in place");
    return node_->value;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() noexcept { return g_grad_enabled; }

namespace detail {

Tensor make_result(OpKind kind, Shape shape, Eigen::VectorXd value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->kind = kind;
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled)
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& in : inputs) node->inputs.push_back(in.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

}  // namespace detail

ComputeGraph ComputeGraph::trace(const Tensor& output) {
    ComputeGraph graph;
    if (!output.defined() || !output.requires_grad()) return graph;

    // Iterative post-order DFS: inputs land before the nodes that consume them.
    std::unordered_set<const detail::Node*> visited;
    std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
    stack.emplace_back(output.node(), 0);
    visited.insert(output.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            auto child = node->inputs[next++];
            if (child->requires_grad && visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
            continue;
        }
        graph.order_.emplace_back(node);
        stack.pop_back();
    }
    return graph;
}

void backward(const Tensor& output) {
    require(output.defined(), ErrorCode::disconnected_graph, "backward on an undefined tensor");
    require(output.size() == 1, ErrorCode::not_scalar,
            "backward needs a scalar output, got shape " + shape_string(output.shape()));
    require(output.requires_grad(), ErrorCode::disconnected_graph, "output is not connected to any trainable leaf");

    const auto graph = ComputeGraph::trace(output);
    output.node()->grad_buffer()[0] += 1.0;
    const auto nodes = graph.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        auto& node = *it->node();
        if (node.kind == OpKind::leaf) continue;
        if (node.grad.size() != node.value.size()) continue;  // nothing reached it
        node.backward(node);
        node.grad.resize(0);  // intermediates are not kept
    }
}

std::vector<Eigen::VectorXd> finite_diff_grad(const std::function<double()>& f, std::span<const Tensor> params,
                                              double eps) {
    require(eps > 0.0, ErrorCode::invalid_spec, "finite-difference step must be positive");
    std::vector<Eigen::VectorXd> grads;
    grads.reserve(params.size());
    auto probe = [&]() {
        const double v = f();
        require(std::isfinite(v), ErrorCode::non_finite_value, "objective returned a non-finite value");
        return v;
    };
    for (const auto& p : params) {
        Tensor param = p;
        auto& values = param.mutable_values();
        Eigen::VectorXd g(values.size());
        for (Eigen::Index i = 0; i < values.size(); ++i) {
            const double original = values[i];
            values[i] = original + eps;
            const double plus = probe();
            values[i] = original - eps;
            const double minus = probe();
            values[i] = original;
            g[i] = (plus - minus) / (2.0 * eps);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

}  // namespace tdm::ad
