#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "tdm/ops.hpp"
#include "tdm/tensor.hpp"

namespace tdm::test {

/// Runs `f` and returns the code of the tdm::Error it throws.
template <typename F>
std::optional<ErrorCode> error_code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return std::nullopt;
}

inline ad::Tensor random_tensor(std::mt19937_64& gen, ad::Shape shape, double lo = -2.0, double hi = 2.0,
                                bool requires_grad = false) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = u(gen);
    return ad::Tensor(std::move(shape), std::move(v), requires_grad);
}

/// |a - n| / max(|a|, |n|) < 1e-4, or |a - n| < 1e-6 when the true value is below 1e-3.
inline bool gradient_close(double analytic, double numeric, double rel_tol = 1e-4, double abs_tol = 1e-6) {
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (scale < 1e-3) return std::abs(analytic - numeric) < abs_tol;
    return std::abs(analytic - numeric) / scale < rel_tol;
}

/// Backward through `build` against central differences for every input.
/// Returns the number of mismatching elements.
inline int count_gradient_mismatches(std::vector<ad::Tensor> inputs,
                                     const std::function<ad::Tensor(const std::vector<ad::Tensor>&)>& build,
                                     double eps = 1e-6) {
    for (auto& t : inputs) t.zero_grad();
    ad::backward(build(inputs));
    auto numeric = ad::finite_diff_grad([&] { return build(inputs).item(); }, inputs, eps);
    int bad = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) continue;
        const auto analytic = inputs[i].grad();
        for (Eigen::Index k = 0; k < analytic.size(); ++k)
            if (!gradient_close(analytic[k], numeric[i][k])) ++bad;
    }
    return bad;
}

}  // namespace tdm::test
