#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tdm/tensor.hpp"

namespace tdm {

enum class Mode { train, eval };

}  // namespace tdm

namespace tdm::ad {

/// Running moments of one batch-normalization layer.
struct BatchNormStats {
    Eigen::VectorXd mean;
    Eigen::VectorXd var;

    static BatchNormStats identity(std::size_t channels) {
        const auto c = static_cast<Eigen::Index>(channels);
        return {Eigen::VectorXd::Zero(c), Eigen::VectorXd::Ones(c)};
    }
};

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEpsilon = 1e-5;

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor squared_difference(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
/// log(clamp(x, lower, upper)); the gradient is zero where the clamp is active.
Tensor log_clamped(const Tensor& x, double lower, double upper);

/// (m×k)·(k×n).
Tensor matmul(const Tensor& a, const Tensor& b);

/// NCHW input, OIHW kernel, stride 1, no padding.
Tensor conv2d_valid(const Tensor& input, const Tensor& kernel);
/// Zero padding of the two trailing (spatial) axes of an NCHW tensor.
Tensor pad2d(const Tensor& input, std::size_t pad);
/// 2×2 window, stride 2, NCHW with even H and W. Ties go to the first
/// element of the window in row-major order.
Tensor maxpool2(const Tensor& input);

/// B×C input, per-channel scale and shift. Train mode normalizes with batch
/// moments and, when `update` is given, folds them into it with momentum 0.1;
/// eval mode (or a batch of one) normalizes with `running`.
Tensor batchnorm1d(const Tensor& x, const Tensor& scale, const Tensor& shift, const BatchNormStats& running,
                   Mode mode, double epsilon = kBatchNormEpsilon, BatchNormStats* update = nullptr);
/// Same as batchnorm1d on B×C×H×W, with moments pooled over batch and space.
Tensor batchnorm2d(const Tensor& x, const Tensor& scale, const Tensor& shift, const BatchNormStats& running,
                   Mode mode, double epsilon = kBatchNormEpsilon, BatchNormStats* update = nullptr);

// Reductions drop the reduced axis (a rank-1 input yields shape [1]).
Tensor mean_over_axis(const Tensor& x, std::size_t axis);
Tensor max_over_axis(const Tensor& x, std::size_t axis);
Tensor sum(const Tensor& x);
Tensor softmax_over_axis(const Tensor& x, std::size_t axis);

Tensor reshape(const Tensor& x, Shape shape);
/// Inserts a new axis at `axis` holding `count` copies of the input.
Tensor expand(const Tensor& x, std::size_t axis, std::size_t count);
Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices);

/// x[..., c] + bias[c] over the last axis.
Tensor bias_add(const Tensor& x, const Tensor& bias);
/// Multiplies each trailing block of x by the matching element of w, where
/// w.shape() is a prefix of x.shape().
Tensor channel_scale(const Tensor& x, const Tensor& w);

/// Attribute bag for the generic dispatcher; each kind reads what it needs.
struct OpAttrs {
    std::size_t axis = 0;
    std::size_t count = 0;
    std::size_t pad = 0;
    double scalar = 0.0;
    double lower = 1e-12;
    double upper = 1.0 - 1e-12;
    Shape shape;
    std::vector<std::size_t> indices;
    Mode mode = Mode::eval;
    double epsilon = kBatchNormEpsilon;
    const BatchNormStats* running = nullptr;
    BatchNormStats* update = nullptr;
};

/// Uniform entry point over every op kind.
Tensor op_forward(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

namespace testing {
/// Fault injection for the gradient checker's own tests: when set, tanh's
/// backward pass returns a wrong derivative.
void corrupt_tanh_backward(bool enabled) noexcept;

/// While alive, folds every discrete choice made by a non-smooth op on this
/// thread (relu signs, max selections, log clamping) into a digest. Two
/// forward passes with equal digests took the same branches, so a central
/// difference between them does not straddle a kink.
class BranchTrace {
public:
    BranchTrace();
    ~BranchTrace();
    BranchTrace(const BranchTrace&) = delete;
    BranchTrace& operator=(const BranchTrace&) = delete;

    std::uint64_t digest() const noexcept { return digest_; }
    void reset() noexcept { digest_ = kSeed; }
    void mix(std::uint64_t value) noexcept { digest_ = (digest_ ^ value) * 0x100000001b3ULL; }

private:
    static constexpr std::uint64_t kSeed = 0xcbf29ce484222325ULL;
    std::uint64_t digest_ = kSeed;
    BranchTrace* previous_;
};
}  // namespace testing

}  // namespace tdm::ad
