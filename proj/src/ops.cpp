#include "tdm/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace tdm::ad {

namespace {

using detail::Node;
using Vec = Eigen::VectorXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;
using Idx = Eigen::Index;

std::atomic<bool> g_corrupt_tanh{false};
thread_local testing::BranchTrace* g_branch_trace = nullptr;

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), ErrorCode::shape_mismatch,
            std::string(op) + ": " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

bool wants(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }
Vec& grad_of(Node& self, std::size_t i) { return self.inputs[i]->grad_buffer(); }
const Vec& value_of(const Node& self, std::size_t i) { return self.inputs[i]->value; }

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t len = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < shape.size(); ++i)
        if (i != axis) out.push_back(shape[i]);
    if (out.empty()) out.push_back(1);
    return out;
}

void check_axis(const Tensor& x, std::size_t axis, const char* op) {
    require(axis < x.rank(), ErrorCode::shape_mismatch,
            std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_string(x.shape()));
}

// Row r = (ci, ky, kx), column p = (oy, ox).
void im2col(const double* x, std::size_t ci_n, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            RowMat& col) {
    const std::size_t ho = h - kh + 1, wo = w - kw + 1;
    Idx r = 0;
    for (std::size_t ci = 0; ci < ci_n; ++ci)
        for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx, ++r) {
                double* dst = col.row(r).data();
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const double* src = x + (ci * h + oy + ky) * w + kx;
                    std::copy(src, src + wo, dst + oy * wo);
                }
            }
}

void col2im_add(const RowMat& col, std::size_t ci_n, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                double* x) {
    const std::size_t ho = h - kh + 1, wo = w - kw + 1;
    Idx r = 0;
    for (std::size_t ci = 0; ci < ci_n; ++ci)
        for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx, ++r) {
                const double* src = col.row(r).data();
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    double* dst = x + (ci * h + oy + ky) * w + kx;
                    for (std::size_t ox = 0; ox < wo; ++ox) dst[ox] += src[oy * wo + ox];
                }
            }
}

Tensor batchnorm_impl(OpKind kind, const Tensor& x, const Tensor& scale, const Tensor& shift,
                      const BatchNormStats& running, Mode mode, double epsilon, BatchNormStats* update,
                      std::size_t batch, std::size_t channels, std::size_t spatial) {
    const char* name = kind == OpKind::batchnorm1d ? "batchnorm1d" : "batchnorm2d";
    require(scale.size() == channels && shift.size() == channels, ErrorCode::shape_mismatch,
            std::string(name) + ": scale/shift length must equal channel count");
    require(static_cast<std::size_t>(running.mean.size()) == channels &&
                static_cast<std::size_t>(running.var.size()) == channels,
            ErrorCode::shape_mismatch, std::string(name) + ": running statistics have the wrong length");

    const std::size_t count = batch * spatial;
    const bool use_batch = mode == Mode::train && count > 1;
    const auto c_n = static_cast<Idx>(channels);
    const auto s_n = static_cast<Idx>(spatial);
    const Idx stride = c_n * s_n;
    // Sample b is a C×S row-major block.
    auto block = [=](const Vec& v, std::size_t b) { return CMapRow(v.data() + static_cast<Idx>(b) * stride, c_n, s_n); };
    auto mut_block = [=](Vec& v, std::size_t b) { return MapRow(v.data() + static_cast<Idx>(b) * stride, c_n, s_n); };
    const Vec& xv = x.values();

    Vec mean(c_n), var(c_n);
    if (use_batch) {
        // Per-row moments combined across rows (Chan et al.), one pass over memory.
        mean.setZero();
        var.setZero();
        Vec row_mean(c_n), row_m2(c_n);
        for (std::size_t b = 0; b < batch; ++b) {
            const auto xb = block(xv, b);
            row_mean = xb.rowwise().mean();
            row_m2 = (xb.colwise() - row_mean).rowwise().squaredNorm();
            const double seen = static_cast<double>(b * spatial), add = static_cast<double>(spatial);
            const Vec delta = row_mean - mean;
            mean += delta * (add / (seen + add));
            var += row_m2 + delta.cwiseAbs2() * (seen * add / (seen + add));
        }
        var /= static_cast<double>(count);
    } else {
        mean = running.mean;
        var = running.var;
    }
    const Vec inv_std = (var.array() + epsilon).rsqrt();

    // out = a * x + c per channel
    const Vec a = scale.values().cwiseProduct(inv_std);
    const Vec c = shift.values() - a.cwiseProduct(mean);
    Vec out(xv.size());
    for (std::size_t b = 0; b < batch; ++b)
        mut_block(out, b) = ((block(xv, b).array().colwise() * a.array()).colwise() + c.array()).matrix();

    if (use_batch && update != nullptr) {
        const double m = kBatchNormMomentum;
        const double unbiased = static_cast<double>(count) / static_cast<double>(count - 1);
        Vec new_mean = (1.0 - m) * running.mean + m * mean;
        Vec new_var = (1.0 - m) * running.var + m * unbiased * var;
        update->mean = std::move(new_mean);
        update->var = std::move(new_var);
    }

    auto backward = [=](Node& self) {
        const Vec& g = self.grad;
        const Vec& xin = value_of(self, 0);
        const Vec& gam = value_of(self, 1);
        // sum_gx = Σ g · xhat with xhat = (x − mean) · inv_std
        Vec sum_g = Vec::Zero(c_n), sum_gx = Vec::Zero(c_n);
        for (std::size_t b = 0; b < batch; ++b) {
            const auto gb = block(g, b);
            sum_g += gb.rowwise().sum();
            sum_gx += gb.cwiseProduct(block(xin, b).colwise() - mean).rowwise().sum();
        }
        sum_gx = sum_gx.cwiseProduct(inv_std);
        if (wants(self, 1)) grad_of(self, 1) += sum_gx;
        if (wants(self, 2)) grad_of(self, 2) += sum_g;
        if (!wants(self, 0)) return;

        Vec& dx = grad_of(self, 0);
        const Vec k = gam.cwiseProduct(inv_std);
        if (!use_batch) {
            for (std::size_t b = 0; b < batch; ++b)
                mut_block(dx, b).array() += block(g, b).array().colwise() * k.array();
            return;
        }
        // dx = k (g − mean_g − xhat · mean_gx) = k g + u x + v per channel
        const double inv_count = 1.0 / static_cast<double>(count);
        const Vec u = -(k.cwiseProduct(sum_gx).cwiseProduct(inv_std)) * inv_count;
        const Vec v = -k.cwiseProduct(sum_g) * inv_count - u.cwiseProduct(mean);
        for (std::size_t b = 0; b < batch; ++b)
            mut_block(dx, b).array() += (block(g, b).array().colwise() * k.array()) +
                                        ((block(xin, b).array().colwise() * u.array()).colwise() + v.array());
    };
    return detail::make_result(kind, x.shape(), std::move(out), {x, scale, shift}, std::move(backward));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "add");
    return detail::make_result(OpKind::add, a.shape(), a.values() + b.values(), {a, b}, [](Node& self) {
        if (wants(self, 0)) grad_of(self, 0) += self.grad;
        if (wants(self, 1)) grad_of(self, 1) += self.grad;
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "sub");
    return detail::make_result(OpKind::sub, a.shape(), a.values() - b.values(), {a, b}, [](Node& self) {
        if (wants(self, 0)) grad_of(self, 0) += self.grad;
        if (wants(self, 1)) grad_of(self, 1) -= self.grad;
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "mul");
    Vec out = a.values().cwiseProduct(b.values());
    return detail::make_result(OpKind::mul, a.shape(), std::move(out), {a, b}, [](Node& self) {
        if (wants(self, 0)) grad_of(self, 0) += self.grad.cwiseProduct(value_of(self, 1));
        if (wants(self, 1)) grad_of(self, 1) += self.grad.cwiseProduct(value_of(self, 0));
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "div");
    Vec out = a.values().cwiseQuotient(b.values());
    return detail::make_result(OpKind::div, a.shape(), std::move(out), {a, b}, [](Node& self) {
        const Vec& bv = value_of(self, 1);
        if (wants(self, 0)) grad_of(self, 0) += self.grad.cwiseQuotient(bv);
        if (wants(self, 1))
            grad_of(self, 1).array() -= self.grad.array() * value_of(self, 0).array() / bv.array().square();
    });
}

Tensor squared_difference(const Tensor& a, const Tensor& b) {
    same_shape(a, b, "squared_difference");
    Vec out = (a.values() - b.values()).array().square().matrix();
    return detail::make_result(OpKind::squared_difference, a.shape(), std::move(out), {a, b}, [](Node& self) {
        Vec d = 2.0 * (value_of(self, 0) - value_of(self, 1)).cwiseProduct(self.grad);
        if (wants(self, 0)) grad_of(self, 0) += d;
        if (wants(self, 1)) grad_of(self, 1) -= d;
    });
}

Tensor relu(const Tensor& x) {
    Vec out = x.values().cwiseMax(0.0);
    if (auto* trace = g_branch_trace)
        for (double v : x.data()) trace->mix(v > 0.0);
    return detail::make_result(OpKind::relu, x.shape(), std::move(out), {x}, [](Node& self) {
        grad_of(self, 0).array() += (value_of(self, 0).array() > 0.0).select(self.grad.array(), 0.0);
    });
}

Tensor tanh(const Tensor& x) {
    Vec out = x.values().array().tanh().matrix();
    return detail::make_result(OpKind::tanh, x.shape(), std::move(out), {x}, [](Node& self) {
        const double fudge = g_corrupt_tanh.load(std::memory_order_relaxed) ? 1.5 : 1.0;
        grad_of(self, 0).array() += fudge * self.grad.array() * (1.0 - self.value.array().square());
    });
}

Tensor sqrt(const Tensor& x) {
    Vec out = x.values().array().sqrt().matrix();
    return detail::make_result(OpKind::sqrt, x.shape(), std::move(out), {x}, [](Node& self) {
        grad_of(self, 0).array() += 0.5 * self.grad.array() / self.value.array();
    });
}

Tensor scale(const Tensor& x, double factor) {
    return detail::make_result(OpKind::scale, x.shape(), x.values() * factor, {x}, [factor](Node& self) {
        grad_of(self, 0) += factor * self.grad;
    });
}

Tensor add_scalar(const Tensor& x, double offset) {
    Vec out = x.values().array() + offset;
    return detail::make_result(OpKind::add_scalar, x.shape(), std::move(out), {x},
                               [](Node& self) { grad_of(self, 0) += self.grad; });
}

Tensor log_clamped(const Tensor& x, double lower, double upper) {
    require(lower > 0.0 && lower < upper, ErrorCode::invalid_spec, "log_clamped: need 0 < lower < upper");
    Vec out = x.values().cwiseMax(lower).cwiseMin(upper).array().log().matrix();
    if (auto* trace = g_branch_trace)
        for (double v : x.data()) trace->mix(v <= lower ? 0 : v >= upper ? 2 : 1);
    return detail::make_result(OpKind::log_clamped, x.shape(), std::move(out), {x}, [lower, upper](Node& self) {
        const Vec& xv = value_of(self, 0);
        Vec& dx = grad_of(self, 0);
        for (Idx i = 0; i < xv.size(); ++i)
            if (xv[i] > lower && xv[i] < upper) dx[i] += self.grad[i] / xv[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), ErrorCode::shape_mismatch,
            "matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    const auto m = static_cast<Idx>(a.dim(0)), k = static_cast<Idx>(a.dim(1)), n = static_cast<Idx>(b.dim(1));
    Vec out(m * n);
    MapRow(out.data(), m, n).noalias() = CMapRow(a.values().data(), m, k) * CMapRow(b.values().data(), k, n);
    return detail::make_result(OpKind::matmul, {a.dim(0), b.dim(1)}, std::move(out), {a, b}, [m, k, n](Node& self) {
        CMapRow g(self.grad.data(), m, n);
        if (wants(self, 0))
            MapRow(grad_of(self, 0).data(), m, k).noalias() += g * CMapRow(value_of(self, 1).data(), k, n).transpose();
        if (wants(self, 1))
            MapRow(grad_of(self, 1).data(), k, n).noalias() += CMapRow(value_of(self, 0).data(), m, k).transpose() * g;
    });
}

Tensor conv2d_valid(const Tensor& input, const Tensor& kernel) {
    require(input.rank() == 4 && kernel.rank() == 4, ErrorCode::shape_mismatch,
            "conv2d_valid expects NCHW input and OIHW kernel");
    const std::size_t n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    require(kernel.dim(1) == ci, ErrorCode::shape_mismatch,
            "conv2d_valid: kernel " + shape_string(kernel.shape()) + " vs input " + shape_string(input.shape()));
    require(h >= kh && w >= kw, ErrorCode::shape_mismatch, "conv2d_valid: kernel larger than input");
    const std::size_t ho = h - kh + 1, wo = w - kw + 1;
    const auto rows = static_cast<Idx>(ci * kh * kw), cols = static_cast<Idx>(ho * wo), co_i = static_cast<Idx>(co);
    const std::size_t in_stride = ci * h * w, out_stride = co * ho * wo;

    Vec out(static_cast<Idx>(n * out_stride));
    RowMat col(rows, cols);
    CMapRow k(kernel.values().data(), co_i, rows);
    for (std::size_t b = 0; b < n; ++b) {
        im2col(input.values().data() + b * in_stride, ci, h, w, kh, kw, col);
        MapRow(out.data() + b * out_stride, co_i, cols).noalias() = k * col;
    }

    auto backward = [=](Node& self) {
        const Vec& x = value_of(self, 0);
        CMapRow kmat(value_of(self, 1).data(), co_i, rows);
        RowMat col_buf(rows, cols);
        RowMat dk;
        if (wants(self, 1)) dk = RowMat::Zero(co_i, rows);
        for (std::size_t b = 0; b < n; ++b) {
            CMapRow g(self.grad.data() + b * out_stride, co_i, cols);
            if (wants(self, 1)) {
                im2col(x.data() + b * in_stride, ci, h, w, kh, kw, col_buf);
                dk.noalias() += g * col_buf.transpose();
            }
            if (wants(self, 0)) {
                col_buf.noalias() = kmat.transpose() * g;
                col2im_add(col_buf, ci, h, w, kh, kw, grad_of(self, 0).data() + b * in_stride);
            }
        }
        if (wants(self, 1)) grad_of(self, 1) += Eigen::Map<const Vec>(dk.data(), dk.size());
    };
    return detail::make_result(OpKind::conv2d_valid, {n, co, ho, wo}, std::move(out), {input, kernel},
                               std::move(backward));
}

Tensor pad2d(const Tensor& input, std::size_t pad) {
    require(input.rank() == 4, ErrorCode::shape_mismatch, "pad2d expects NCHW input");
    const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t ph = h + 2 * pad, pw = w + 2 * pad;
    Vec out = Vec::Zero(static_cast<Idx>(planes * ph * pw));
    const double* src = input.values().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < h; ++y)
            std::copy(src + (p * h + y) * w, src + (p * h + y + 1) * w, out.data() + (p * ph + y + pad) * pw + pad);
    return detail::make_result(OpKind::pad2d, {input.dim(0), input.dim(1), ph, pw}, std::move(out), {input},
                               [=](Node& self) {
                                   Vec& dx = grad_of(self, 0);
                                   for (std::size_t p = 0; p < planes; ++p)
                                       for (std::size_t y = 0; y < h; ++y)
                                           for (std::size_t x = 0; x < w; ++x)
                                               dx[static_cast<Idx>((p * h + y) * w + x)] +=
                                                   self.grad[static_cast<Idx>((p * ph + y + pad) * pw + x + pad)];
                               });
}

Tensor maxpool2(const Tensor& input) {
    require(input.rank() == 4, ErrorCode::shape_mismatch, "maxpool2 expects NCHW input");
    const std::size_t planes = input.dim(0) * input.dim(1), h = input.dim(2), w = input.dim(3);
    require(h % 2 == 0 && w % 2 == 0, ErrorCode::shape_mismatch,
            "maxpool2 needs even spatial size, got " + shape_string(input.shape()));
    const std::size_t oh = h / 2, ow = w / 2;
    Vec out(static_cast<Idx>(planes * oh * ow));
    std::vector<std::size_t> argmax(planes * oh * ow);
    const double* x = input.values().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xo = 0; xo < ow; ++xo) {
                const std::size_t o = (p * oh + y) * ow + xo;
                std::size_t best = (p * h + 2 * y) * w + 2 * xo;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t i = (p * h + 2 * y + dy) * w + 2 * xo + dx;
                        if (x[i] > x[best]) best = i;
                    }
                argmax[o] = best;
                out[static_cast<Idx>(o)] = x[best];
            }
    if (auto* trace = g_branch_trace)
        for (auto i : argmax) trace->mix(i);
    return detail::make_result(OpKind::maxpool2, {input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
                               [argmax = std::move(argmax)](Node& self) {
                                   Vec& dx = grad_of(self, 0);
                                   for (std::size_t o = 0; o < argmax.size(); ++o)
                                       dx[static_cast<Idx>(argmax[o])] += self.grad[static_cast<Idx>(o)];
                               });
}

Tensor batchnorm1d(const Tensor& x, const Tensor& scale, const Tensor& shift, const BatchNormStats& running,
                   Mode mode, double epsilon, BatchNormStats* update) {
    require(x.rank() == 2, ErrorCode::shape_mismatch, "batchnorm1d expects B×C input");
    return batchnorm_impl(OpKind::batchnorm1d, x, scale, shift, running, mode, epsilon, update, x.dim(0), x.dim(1), 1);
}

Tensor batchnorm2d(const Tensor& x, const Tensor& scale, const Tensor& shift, const BatchNormStats& running,
                   Mode mode, double epsilon, BatchNormStats* update) {
    require(x.rank() == 4, ErrorCode::shape_mismatch, "batchnorm2d expects B×C×H×W input");
    return batchnorm_impl(OpKind::batchnorm2d, x, scale, shift, running, mode, epsilon, update, x.dim(0), x.dim(1),
                          x.dim(2) * x.dim(3));
}

Tensor mean_over_axis(const Tensor& x, std::size_t axis) {
    check_axis(x, axis, "mean_over_axis");
    const auto s = split_at(x.shape(), axis);
    const double* xv = x.values().data();
    Vec out = Vec::Zero(static_cast<Idx>(s.outer * s.inner));
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t l = 0; l < s.len; ++l) {
            const double* row = xv + (o * s.len + l) * s.inner;
            double* dst = out.data() + o * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += row[i];
        }
    out /= static_cast<double>(s.len);
    return detail::make_result(OpKind::mean_over_axis, drop_axis(x.shape(), axis), std::move(out), {x},
                               [s](Node& self) {
                                   Vec& dx = grad_of(self, 0);
                                   const double inv = 1.0 / static_cast<double>(s.len);
                                   for (std::size_t o = 0; o < s.outer; ++o)
                                       for (std::size_t l = 0; l < s.len; ++l)
                                           for (std::size_t i = 0; i < s.inner; ++i)
                                               dx[static_cast<Idx>((o * s.len + l) * s.inner + i)] +=
                                                   self.grad[static_cast<Idx>(o * s.inner + i)] * inv;
                               });
}

Tensor max_over_axis(const Tensor& x, std::size_t axis) {
    check_axis(x, axis, "max_over_axis");
    const auto s = split_at(x.shape(), axis);
    const double* xv = x.values().data();
    Vec out(static_cast<Idx>(s.outer * s.inner));
    std::vector<std::size_t> argmax(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            std::size_t best = o * s.len * s.inner + i;
            for (std::size_t l = 1; l < s.len; ++l) {
                const std::size_t j = (o * s.len + l) * s.inner + i;
                if (xv[j] > xv[best]) best = j;
            }
            argmax[o * s.inner + i] = best;
            out[static_cast<Idx>(o * s.inner + i)] = xv[best];
        }
    if (auto* trace = g_branch_trace)
        for (auto i : argmax) trace->mix(i);
    return detail::make_result(OpKind::max_over_axis, drop_axis(x.shape(), axis), std::move(out), {x},
                               [argmax = std::move(argmax)](Node& self) {
                                   Vec& dx = grad_of(self, 0);
                                   for (std::size_t o = 0; o < argmax.size(); ++o)
                                       dx[static_cast<Idx>(argmax[o])] += self.grad[static_cast<Idx>(o)];
                               });
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    return detail::make_result(OpKind::sum, {1}, Vec::Constant(1, total), {x},
                               [](Node& self) { grad_of(self, 0).array() += self.grad[0]; });
}

Tensor softmax_over_axis(const Tensor& x, std::size_t axis) {
    check_axis(x, axis, "softmax_over_axis");
    const auto s = split_at(x.shape(), axis);
    const double* xv = x.values().data();
    Vec out(x.values().size());
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t i = 0; i < s.inner; ++i) {
            auto at = [&](std::size_t l) { return (o * s.len + l) * s.inner + i; };
            double peak = xv[at(0)];
            for (std::size_t l = 1; l < s.len; ++l) peak = std::max(peak, xv[at(l)]);
            double z = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) {
                const double e = std::exp(xv[at(l)] - peak);
                out[static_cast<Idx>(at(l))] = e;
                z += e;
            }
            for (std::size_t l = 0; l < s.len; ++l) out[static_cast<Idx>(at(l))] /= z;
        }
    return detail::make_result(OpKind::softmax_over_axis, x.shape(), std::move(out), {x}, [s](Node& self) {
        Vec& dx = grad_of(self, 0);
        const Vec& y = self.value;
        const Vec& g = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) {
                auto at = [&](std::size_t l) { return static_cast<Idx>((o * s.len + l) * s.inner + i); };
                double dot = 0.0;
                for (std::size_t l = 0; l < s.len; ++l) dot += g[at(l)] * y[at(l)];
                for (std::size_t l = 0; l < s.len; ++l) dx[at(l)] += y[at(l)] * (g[at(l)] - dot);
            }
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    require(numel(shape) == x.size(), ErrorCode::shape_mismatch,
            "reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
    for (auto d : shape) require(d >= 1, ErrorCode::shape_mismatch, "reshape to a zero-sized dimension");
    return detail::make_result(OpKind::reshape, std::move(shape), x.values(), {x},
                               [](Node& self) { grad_of(self, 0) += self.grad; });
}

Tensor expand(const Tensor& x, std::size_t axis, std::size_t count) {
    require(axis <= x.rank() && count >= 1, ErrorCode::shape_mismatch, "expand: bad axis or count");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis; i < x.rank(); ++i) inner *= x.dim(i);
    Shape shape = x.shape();
    shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
    Vec out(static_cast<Idx>(outer * count * inner));
    const double* xv = x.values().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < count; ++k)
            std::copy(xv + o * inner, xv + (o + 1) * inner, out.data() + (o * count + k) * inner);
    return detail::make_result(OpKind::expand, std::move(shape), std::move(out), {x}, [=](Node& self) {
        Vec& dx = grad_of(self, 0);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < count; ++k)
                for (std::size_t i = 0; i < inner; ++i)
                    dx[static_cast<Idx>(o * inner + i)] += self.grad[static_cast<Idx>((o * count + k) * inner + i)];
    });
}

Tensor index_select(const Tensor& x, std::size_t axis, std::span<const std::size_t> indices) {
    check_axis(x, axis, "index_select");
    require(!indices.empty(), ErrorCode::shape_mismatch, "index_select: empty index list");
    const auto s = split_at(x.shape(), axis);
    for (auto i : indices) require(i < s.len, ErrorCode::shape_mismatch, "index_select: index out of range");
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    Shape shape = x.shape();
    shape[axis] = idx.size();
    Vec out(static_cast<Idx>(s.outer * idx.size() * s.inner));
    const double* xv = x.values().data();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < idx.size(); ++j)
            std::copy(xv + (o * s.len + idx[j]) * s.inner, xv + (o * s.len + idx[j] + 1) * s.inner,
                      out.data() + (o * idx.size() + j) * s.inner);
    return detail::make_result(OpKind::index_select, std::move(shape), std::move(out), {x},
                               [s, idx = std::move(idx)](Node& self) {
                                   Vec& dx = grad_of(self, 0);
                                   for (std::size_t o = 0; o < s.outer; ++o)
                                       for (std::size_t j = 0; j < idx.size(); ++j)
                                           for (std::size_t i = 0; i < s.inner; ++i)
                                               dx[static_cast<Idx>((o * s.len + idx[j]) * s.inner + i)] +=
                                                   self.grad[static_cast<Idx>((o * idx.size() + j) * s.inner + i)];
                               });
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
    require(x.rank() >= 1 && bias.size() == x.dim(x.rank() - 1), ErrorCode::shape_mismatch,
            "bias_add: bias length must equal the last axis of " + shape_string(x.shape()));
    const auto c = static_cast<Idx>(bias.size());
    const Idx rows = static_cast<Idx>(x.size()) / c;
    Vec out(x.values().size());
    MapRow(out.data(), rows, c) = CMapRow(x.values().data(), rows, c).rowwise() + bias.values().transpose();
    return detail::make_result(OpKind::bias_add, x.shape(), std::move(out), {x, bias}, [rows, c](Node& self) {
        if (wants(self, 0)) grad_of(self, 0) += self.grad;
        if (wants(self, 1)) grad_of(self, 1) += CMapRow(self.grad.data(), rows, c).colwise().sum().transpose();
    });
}

Tensor channel_scale(const Tensor& x, const Tensor& w) {
    require(w.rank() <= x.rank() && std::equal(w.shape().begin(), w.shape().end(), x.shape().begin()),
            ErrorCode::shape_mismatch,
            "channel_scale: weight " + shape_string(w.shape()) + " is not a prefix of " + shape_string(x.shape()));
    const auto groups = static_cast<Idx>(w.size());
    const Idx block = static_cast<Idx>(x.size()) / groups;
    Vec out(x.values().size());
    MapRow(out.data(), groups, block) =
        CMapRow(x.values().data(), groups, block).array().colwise() * w.values().array();
    return detail::make_result(OpKind::channel_scale, x.shape(), std::move(out), {x, w}, [groups, block](Node& self) {
        CMapRow g(self.grad.data(), groups, block);
        if (wants(self, 0))
            MapRow(grad_of(self, 0).data(), groups, block).array() += g.array().colwise() * value_of(self, 1).array();
        if (wants(self, 1))
            grad_of(self, 1) +=
                (g.array() * CMapRow(value_of(self, 0).data(), groups, block).array()).rowwise().sum().matrix();
    });
}

Tensor op_forward(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs) {
    auto arity = [&](std::size_t n) {
        require(inputs.size() == n, ErrorCode::shape_mismatch,
                std::string(to_string(kind)) + " takes " + std::to_string(n) + " inputs");
    };
    auto stats = [&]() -> const BatchNormStats& {
        require(attrs.running != nullptr, ErrorCode::shape_mismatch, "batchnorm needs running statistics");
        return *attrs.running;
    };
    switch (kind) {
        case OpKind::add: arity(2); return add(inputs[0], inputs[1]);
        case OpKind::sub: arity(2); return sub(inputs[0], inputs[1]);
        case OpKind::mul: arity(2); return mul(inputs[0], inputs[1]);
        case OpKind::div: arity(2); return div(inputs[0], inputs[1]);
        case OpKind::matmul: arity(2); return matmul(inputs[0], inputs[1]);
        case OpKind::conv2d_valid: arity(2); return conv2d_valid(inputs[0], inputs[1]);
        case OpKind::maxpool2: arity(1); return maxpool2(inputs[0]);
        case OpKind::relu: arity(1); return relu(inputs[0]);
        case OpKind::tanh: arity(1); return tanh(inputs[0]);
        case OpKind::sqrt: arity(1); return sqrt(inputs[0]);
        case OpKind::batchnorm1d:
            arity(3);
            return batchnorm1d(inputs[0], inputs[1], inputs[2], stats(), attrs.mode, attrs.epsilon, attrs.update);
        case OpKind::batchnorm2d:
            arity(3);
            return batchnorm2d(inputs[0], inputs[1], inputs[2], stats(), attrs.mode, attrs.epsilon, attrs.update);
        case OpKind::mean_over_axis: arity(1); return mean_over_axis(inputs[0], attrs.axis);
        case OpKind::max_over_axis: arity(1); return max_over_axis(inputs[0], attrs.axis);
        case OpKind::sum: arity(1); return sum(inputs[0]);
        case OpKind::softmax_over_axis: arity(1); return softmax_over_axis(inputs[0], attrs.axis);
        case OpKind::squared_difference: arity(2); return squared_difference(inputs[0], inputs[1]);
        case OpKind::pad2d: arity(1); return pad2d(inputs[0], attrs.pad);
        case OpKind::reshape: arity(1); return reshape(inputs[0], attrs.shape);
        case OpKind::expand: arity(1); return expand(inputs[0], attrs.axis, attrs.count);
        case OpKind::index_select: arity(1); return index_select(inputs[0], attrs.axis, attrs.indices);
        case OpKind::scale: arity(1); return scale(inputs[0], attrs.scalar);
        case OpKind::add_scalar: arity(1); return add_scalar(inputs[0], attrs.scalar);
        case OpKind::bias_add: arity(2); return bias_add(inputs[0], inputs[1]);
        case OpKind::channel_scale: arity(2); return channel_scale(inputs[0], inputs[1]);
        case OpKind::log_clamped: arity(1); return log_clamped(inputs[0], attrs.lower, attrs.upper);
        case OpKind::leaf: break;
    }
    raise(ErrorCode::unsupported_kind, "no forward rule for op kind " + std::string(to_string(kind)));
}

namespace testing {
void corrupt_tanh_backward(bool enabled) noexcept { g_corrupt_tanh.store(enabled, std::memory_order_relaxed); }

BranchTrace::BranchTrace() : previous_(g_branch_trace) { g_branch_trace = this; }
BranchTrace::~BranchTrace() { g_branch_trace = previous_; }
}  // namespace testing

}  // namespace tdm::ad
