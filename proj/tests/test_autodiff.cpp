#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tdm/ops.hpp"
#include "tdm/tensor.hpp"

namespace ad = tdm::ad;
using tdm::ErrorCode;
using tdm::Mode;
using ad::Tensor;

namespace {

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const tdm::Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected a tdm::Error";
    return ErrorCode::io_error;
}

/// Weighted sum so each output element gets a distinct upstream gradient.
Tensor probe(const Tensor& y, std::mt19937_64& gen) {
    auto w = tdm::test::random_tensor(gen, y.shape(), 0.5, 1.5);
    return ad::sum(ad::mul(y, w));
}

}  // namespace

TEST(TensorNew, RowMajorLayout) {
    Tensor t = ad::tensor_new({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(t.at({1, 1}), 4.0);
    EXPECT_EQ(t.at({0, 1}), 2.0);
}

TEST(TensorNew, ZeroVectorHasNoGrad) {
    Tensor t = ad::tensor_new({3}, {0, 0, 0});
    EXPECT_FALSE(t.has_grad());
    EXPECT_EQ(t.values().norm(), 0.0);
}

TEST(TensorNew, ShapeMismatch) {
    EXPECT_EQ(code_of([] { ad::tensor_new({2}, {1, 2, 3}); }), ErrorCode::shape_mismatch);
    EXPECT_EQ(code_of([] { ad::tensor_new({0}, {}); }), ErrorCode::shape_mismatch);
}

TEST(OpForward, ConvIdentityKernel) {
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor k({1, 1, 1, 1}, {1});
    Tensor y = ad::conv2d_valid(x, k);
    EXPECT_EQ(y.shape(), (ad::Shape{1, 1, 2, 2}));
    EXPECT_EQ(y.values(), x.values());
}

TEST(OpForward, ConvAllOnesKernel) {
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor k = Tensor::ones({1, 1, 2, 2});
    Tensor y = ad::conv2d_valid(x, k);
    EXPECT_EQ(y.shape(), (ad::Shape{1, 1, 1, 1}));
    EXPECT_EQ(y.item(), 10.0);
}

TEST(OpForward, ConvOutputSize) {
    std::mt19937_64 gen(3);
    for (std::size_t kh = 1; kh <= 3; ++kh)
        for (std::size_t kw = 1; kw <= 3; ++kw) {
            auto x = tdm::test::random_tensor(gen, {2, 3, 5, 6});
            auto k = tdm::test::random_tensor(gen, {4, 3, kh, kw});
            auto y = ad::conv2d_valid(x, k);
            EXPECT_EQ(y.shape(), (ad::Shape{2, 4, 5 - kh + 1, 6 - kw + 1}));
        }
}

TEST(OpForward, ConvMatchesDirectLoop) {
    std::mt19937_64 gen(5);
    auto x = tdm::test::random_tensor(gen, {2, 2, 4, 5});
    auto k = tdm::test::random_tensor(gen, {3, 2, 2, 3});
    auto y = ad::conv2d_valid(x, k);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 3; ++o)
            for (std::size_t r = 0; r < 3; ++r)
                for (std::size_t c = 0; c < 3; ++c) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < 2; ++i)
                        for (std::size_t a = 0; a < 2; ++a)
                            for (std::size_t b = 0; b < 3; ++b)
                                acc += x.at({n, i, r + a, c + b}) * k.at({o, i, a, b});
                    EXPECT_NEAR(y.at({n, o, r, c}), acc, 1e-12);
                }
}

TEST(OpForward, SoftmaxUniform) {
    auto y = ad::softmax_over_axis(Tensor({3}, {0, 0, 0}), 0);
    for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(OpForward, SoftmaxRowsNormalizedAndShiftInvariant) {
    std::mt19937_64 gen(11);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = tdm::test::random_tensor(gen, {3, 4, 2}, -5.0, 5.0);
        for (std::size_t axis = 0; axis < 3; ++axis) {
            auto y = ad::softmax_over_axis(x, axis);
            auto sums = ad::mean_over_axis(y, axis);
            for (double s : sums.data()) EXPECT_NEAR(s * static_cast<double>(x.dim(axis)), 1.0, 1e-12);
            for (double v : y.data()) {
                EXPECT_GT(v, 0.0);
                EXPECT_LE(v, 1.0);
            }
            auto shifted = ad::softmax_over_axis(ad::add_scalar(x, 7.25), axis);
            EXPECT_LT((shifted.values() - y.values()).cwiseAbs().maxCoeff(), 1e-12);
        }
    }
}

TEST(OpForward, MaxPoolTieGoesToFirstElement) {
    Tensor x({1, 1, 2, 2}, {1, 1, 1, 1}, true);
    ad::backward(ad::sum(ad::maxpool2(x)));
    EXPECT_EQ(x.grad(), (Eigen::VectorXd(4) << 1, 0, 0, 0).finished());
}

TEST(OpForward, DispatcherMatchesFreeFunctions) {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 2}, {5, 6, 7, 8});
    const Tensor pair[] = {a, b};
    EXPECT_EQ(ad::op_forward(ad::OpKind::matmul, pair).values(), ad::matmul(a, b).values());
    ad::OpAttrs attrs;
    attrs.axis = 1;
    const Tensor single[] = {a};
    EXPECT_EQ(ad::op_forward(ad::OpKind::softmax_over_axis, single, attrs).values(),
              ad::softmax_over_axis(a, 1).values());
    EXPECT_EQ(code_of([&] { ad::op_forward(ad::OpKind::leaf, single); }), ErrorCode::unsupported_kind);
    EXPECT_EQ(code_of([&] { ad::op_forward(ad::OpKind::add, single); }), ErrorCode::shape_mismatch);
}

TEST(OpForward, ShapeErrors) {
    Tensor a({2, 3}, std::vector<double>(6, 1.0));
    Tensor b({3, 2}, std::vector<double>(6, 1.0));
    EXPECT_EQ(code_of([&] { ad::add(a, b); }), ErrorCode::shape_mismatch);
    EXPECT_EQ(code_of([&] { ad::matmul(a, a); }), ErrorCode::shape_mismatch);
    EXPECT_EQ(code_of([&] { ad::maxpool2(Tensor({1, 1, 3, 2}, std::vector<double>(6, 0.0))); }),
              ErrorCode::shape_mismatch);
}

TEST(OpForward, Deterministic) {
    std::mt19937_64 gen(9);
    auto x = tdm::test::random_tensor(gen, {3, 2, 8, 8});
    auto k = tdm::test::random_tensor(gen, {4, 2, 3, 3});
    auto s = ad::BatchNormStats::identity(4);
    auto run = [&] {
        auto y = ad::conv2d_valid(ad::pad2d(x, 1), k);
        y = ad::batchnorm2d(y, Tensor::ones({4}), Tensor::zeros({4}), s, Mode::train);
        return ad::softmax_over_axis(ad::maxpool2(ad::relu(y)), 1).values();
    };
    const Eigen::VectorXd first = run();
    EXPECT_EQ(run(), first);
}

TEST(Backward, SquareAtThree) {
    Tensor x({1}, {3.0}, true);
    ad::backward(ad::mul(x, x));
    EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SumIsAllOnes) {
    Tensor x({4}, {1, -2, 3, 0.5}, true);
    ad::backward(ad::sum(x));
    EXPECT_EQ(x.grad(), Eigen::VectorXd::Ones(4));
}

TEST(Backward, SharedSubexpressionsAccumulate) {
    Tensor x({2}, {1.5, -2.0}, true);
    Tensor y = ad::tanh(x);
    ad::backward(ad::sum(ad::add(y, ad::mul(y, x))));
    for (int i = 0; i < 2; ++i) {
        const double t = std::tanh(x[i]);
        const double dt = 1.0 - t * t;
        EXPECT_NEAR(x.grad()[i], dt + dt * x[i] + t, 1e-14);
    }
}

TEST(Backward, Errors) {
    Tensor x({2}, {1, 2}, true);
    EXPECT_EQ(code_of([&] { ad::backward(ad::relu(x)); }), ErrorCode::not_scalar);
    Tensor c({1}, {1.0});
    EXPECT_EQ(code_of([&] { ad::backward(ad::scale(c, 2.0)); }), ErrorCode::disconnected_graph);
}

TEST(Backward, UnreachableLeafGetsZero) {
    Tensor x({1}, {2.0}, true);
    Tensor unused({3}, {1, 2, 3}, true);
    ad::backward(ad::mul(x, x));
    EXPECT_EQ(unused.grad(), Eigen::VectorXd::Zero(3));
}

TEST(Backward, NoGradGuardStopsRecording) {
    Tensor x({1}, {2.0}, true);
    ad::NoGradGuard guard;
    EXPECT_FALSE(ad::mul(x, x).requires_grad());
}

TEST(ComputeGraph, InputsPrecedeConsumers) {
    Tensor x({2}, {1, 2}, true);
    Tensor y = ad::relu(x);
    Tensor z = ad::sum(ad::add(y, ad::tanh(y)));
    auto graph = ad::ComputeGraph::trace(z);
    auto nodes = graph.nodes();
    EXPECT_EQ(nodes.size(), 5u);
    for (std::size_t i = 0; i < nodes.size(); ++i)
        for (const auto& in : nodes[i].node()->inputs) {
            auto pos = std::find_if(nodes.begin(), nodes.end(), [&](const Tensor& t) { return t.node() == in; });
            ASSERT_NE(pos, nodes.end());
            EXPECT_LT(static_cast<std::size_t>(pos - nodes.begin()), i);
        }
}

TEST(FiniteDiff, QuadraticAndTanh) {
    Tensor x({1}, {3.0}, true);
    auto g = ad::finite_diff_grad([&] { return x[0] * x[0]; }, std::span(&x, 1), 1e-5);
    EXPECT_NEAR(g[0][0], 6.0, 1e-8);
    Tensor z({1}, {0.0}, true);
    auto h = ad::finite_diff_grad([&] { return std::tanh(z[0]); }, std::span(&z, 1), 1e-5);
    EXPECT_NEAR(h[0][0], 1.0, 1e-8);
    EXPECT_EQ(z[0], 0.0);
}

TEST(FiniteDiff, NonFiniteObjective) {
    Tensor x({1}, {1.0}, true);
    EXPECT_EQ(code_of([&] { ad::finite_diff_grad([] { return std::nan(""); }, std::span(&x, 1), 1e-5); }),
              ErrorCode::non_finite_value);
}

// Every differentiable kind against central differences on 50 random inputs.
class GradientProperty : public ::testing::TestWithParam<const char*> {};

TEST_P(GradientProperty, MatchesFiniteDifferences) {
    const std::string kind = GetParam();
    std::mt19937_64 gen(std::hash<std::string>{}(kind));
    using V = std::vector<Tensor>;
    for (int trial = 0; trial < 50; ++trial) {
        auto r = [&](ad::Shape s, double lo = -2.0, double hi = 2.0) {
            return tdm::test::random_tensor(gen, std::move(s), lo, hi, true);
        };
        std::mt19937_64 wgen(trial);
        auto finish = [&wgen](const Tensor& y) {
            auto g = wgen;
            return probe(y, g);
        };
        V inputs;
        std::function<Tensor(const V&)> f;
        if (kind == "add") { inputs = {r({4}), r({4})}; f = [&](const V& v) { return finish(ad::add(v[0], v[1])); }; }
        else if (kind == "sub") { inputs = {r({2, 3}), r({2, 3})}; f = [&](const V& v) { return finish(ad::sub(v[0], v[1])); }; }
        else if (kind == "mul") { inputs = {r({6}), r({6})}; f = [&](const V& v) { return finish(ad::mul(v[0], v[1])); }; }
        else if (kind == "div") { inputs = {r({5}), r({5}, 0.5, 2.0)}; f = [&](const V& v) { return finish(ad::div(v[0], v[1])); }; }
        else if (kind == "matmul") { inputs = {r({2, 3}), r({3, 2})}; f = [&](const V& v) { return finish(ad::matmul(v[0], v[1])); }; }
        else if (kind == "conv2d_valid") { inputs = {r({1, 2, 3, 3}), r({2, 2, 2, 2})}; f = [&](const V& v) { return finish(ad::conv2d_valid(v[0], v[1])); }; }
        else if (kind == "pad2d") { inputs = {r({1, 2, 2, 2})}; f = [&](const V& v) { return finish(ad::pad2d(v[0], 1)); }; }
        else if (kind == "maxpool2") { inputs = {r({1, 2, 2, 4})}; f = [&](const V& v) { return finish(ad::maxpool2(v[0])); }; }
        else if (kind == "relu") { inputs = {r({8})}; f = [&](const V& v) { return finish(ad::relu(v[0])); }; }
        else if (kind == "tanh") { inputs = {r({8})}; f = [&](const V& v) { return finish(ad::tanh(v[0])); }; }
        else if (kind == "sqrt") { inputs = {r({8}, 0.2, 2.0)}; f = [&](const V& v) { return finish(ad::sqrt(v[0])); }; }
        else if (kind == "batchnorm1d") {
            inputs = {r({4, 3}), r({3}), r({3})};
            f = [&](const V& v) {
                return finish(ad::batchnorm1d(v[0], v[1], v[2], ad::BatchNormStats::identity(3), Mode::train));
            };
        } else if (kind == "batchnorm1d_eval") {
            inputs = {r({2, 3}), r({3}), r({3})};
            f = [&](const V& v) {
                ad::BatchNormStats s{Eigen::Vector3d(0.1, -0.2, 0.3), Eigen::Vector3d(0.5, 1.5, 2.0)};
                return finish(ad::batchnorm1d(v[0], v[1], v[2], s, Mode::eval));
            };
        } else if (kind == "batchnorm2d") {
            inputs = {r({2, 2, 2, 2}), r({2}), r({2})};
            f = [&](const V& v) {
                return finish(ad::batchnorm2d(v[0], v[1], v[2], ad::BatchNormStats::identity(2), Mode::train));
            };
        } else if (kind == "mean_over_axis") { inputs = {r({2, 3, 2})}; f = [&](const V& v) { return finish(ad::mean_over_axis(v[0], 1)); }; }
        else if (kind == "max_over_axis") { inputs = {r({3, 4})}; f = [&](const V& v) { return finish(ad::max_over_axis(v[0], 1)); }; }
        else if (kind == "sum") { inputs = {r({7})}; f = [&](const V& v) { return ad::sum(ad::mul(v[0], v[0])); }; }
        else if (kind == "softmax_over_axis") { inputs = {r({3, 4})}; f = [&](const V& v) { return finish(ad::softmax_over_axis(v[0], 1)); }; }
        else if (kind == "squared_difference") { inputs = {r({6}), r({6})}; f = [&](const V& v) { return finish(ad::squared_difference(v[0], v[1])); }; }
        else if (kind == "reshape") { inputs = {r({2, 6})}; f = [&](const V& v) { return finish(ad::reshape(v[0], {3, 4})); }; }
        else if (kind == "expand") { inputs = {r({2, 3})}; f = [&](const V& v) { return finish(ad::expand(v[0], 1, 3)); }; }
        else if (kind == "index_select") {
            inputs = {r({4, 3})};
            f = [&](const V& v) { const std::size_t idx[] = {2, 0, 2}; return finish(ad::index_select(v[0], 0, idx)); };
        } else if (kind == "scale") { inputs = {r({5})}; f = [&](const V& v) { return finish(ad::scale(v[0], -1.75)); }; }
        else if (kind == "add_scalar") { inputs = {r({5})}; f = [&](const V& v) { return finish(ad::add_scalar(v[0], 0.5)); }; }
        else if (kind == "bias_add") { inputs = {r({3, 4}), r({4})}; f = [&](const V& v) { return finish(ad::bias_add(v[0], v[1])); }; }
        else if (kind == "channel_scale") { inputs = {r({2, 3, 2}), r({2, 3})}; f = [&](const V& v) { return finish(ad::channel_scale(v[0], v[1])); }; }
        else if (kind == "log_clamped") { inputs = {r({6}, 0.1, 0.9)}; f = [&](const V& v) { return finish(ad::log_clamped(v[0], 1e-12, 1.0 - 1e-12)); }; }
        else FAIL() << "unknown kind " << kind;
        EXPECT_EQ(tdm::test::count_gradient_mismatches(inputs, f), 0) << kind << " trial " << trial;
    }
}

INSTANTIATE_TEST_SUITE_P(AllKinds, GradientProperty,
                         ::testing::Values("add", "sub", "mul", "div", "matmul", "conv2d_valid", "pad2d", "maxpool2",
                                           "relu", "tanh", "sqrt", "batchnorm1d", "batchnorm1d_eval", "batchnorm2d",
                                           "mean_over_axis", "max_over_axis", "sum", "softmax_over_axis",
                                           "squared_difference", "reshape", "expand", "index_select", "scale",
                                           "add_scalar", "bias_add", "channel_scale", "log_clamped"));

TEST(BatchNorm, RunningStatsUpdateAndFallback) {
    Tensor x({2, 1}, {1.0, 3.0});
    auto stats = ad::BatchNormStats::identity(1);
    ad::batchnorm1d(x, Tensor::ones({1}), Tensor::zeros({1}), stats, Mode::train, 1e-5, &stats);
    EXPECT_NEAR(stats.mean[0], 0.1 * 2.0, 1e-15);
    EXPECT_NEAR(stats.var[0], 0.9 * 1.0 + 0.1 * 2.0, 1e-15);  // unbiased batch variance is 2

    // Batch of one falls back to running statistics even in train mode.
    auto before = stats;
    Tensor single({1, 1}, {5.0});
    auto y = ad::batchnorm1d(single, Tensor::ones({1}), Tensor::zeros({1}), stats, Mode::train, 1e-5, &stats);
    EXPECT_NEAR(y.item(), (5.0 - before.mean[0]) / std::sqrt(before.var[0] + 1e-5), 1e-12);
    EXPECT_EQ(stats.mean, before.mean);
}

TEST(BatchNorm, EvalDoesNotTouchStats) {
    Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
    auto stats = ad::BatchNormStats::identity(2);
    ad::batchnorm1d(x, Tensor::ones({2}), Tensor::zeros({2}), stats, Mode::eval, 1e-5, &stats);
    EXPECT_EQ(stats.mean, Eigen::VectorXd::Zero(2));
    EXPECT_EQ(stats.var, Eigen::VectorXd::Ones(2));
}

TEST(FaultInjection, CorruptTanhIsDetectable) {
    std::mt19937_64 gen(1);
    auto x = tdm::test::random_tensor(gen, {4}, -1.0, 1.0, true);
    ad::testing::corrupt_tanh_backward(true);
    const int bad = tdm::test::count_gradient_mismatches({x}, [](const std::vector<Tensor>& v) {
        return ad::sum(ad::tanh(v[0]));
    });
    ad::testing::corrupt_tanh_backward(false);
    EXPECT_GT(bad, 0);
}
