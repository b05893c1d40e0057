#include "tdm/backbone.hpp"

#include <cmath>
#include <string>

#include "tdm/rng.hpp"

namespace tdm {

namespace {

constexpr std::size_t kBlocks = 4;
constexpr std::size_t kKernel = 3;

ad::Tensor run(const BackboneParams& params, const ad::Tensor& images, Mode mode, BackboneParams* update) {
    require(images.rank() == 4, ErrorCode::shape_mismatch,
            "backbone expects B×C×H×W images, got " + ad::shape_string(images.shape()));
    require(images.dim(1) == params.plan.front(), ErrorCode::shape_mismatch,
            "backbone expects " + std::to_string(params.plan.front()) + " input channels, got " +
                std::to_string(images.dim(1)));
    require(images.dim(2) % 16 == 0 && images.dim(3) % 16 == 0, ErrorCode::shape_mismatch,
            "backbone input spatial size must be divisible by 16, got " + ad::shape_string(images.shape()));

    ad::Tensor x = images;
    for (std::size_t b = 0; b < params.blocks.size(); ++b) {
        const auto& block = params.blocks[b];
        x = ad::conv2d_valid(ad::pad2d(x, 1), block.kernel);
        x = ad::batchnorm2d(x, block.bn_scale, block.bn_shift, block.running, mode, ad::kBatchNormEpsilon,
                            update ? &update->blocks[b].running : nullptr);
        // relu commutes with the max, so pooling first touches a quarter of the data
        x = ad::relu(ad::maxpool2(x));
    }
    return x;
}

}  // namespace

std::vector<ad::Tensor> BackboneParams::parameters() const {
    std::vector<ad::Tensor> out;
    for (const auto& b : blocks) {
        out.push_back(b.kernel);
        out.push_back(b.bn_scale);
        out.push_back(b.bn_shift);
    }
    return out;
}

BackboneParams BackboneParams::clone() const {
    BackboneParams copy{plan, {}};
    for (const auto& b : blocks) copy.blocks.push_back({b.kernel.clone(), b.bn_scale.clone(), b.bn_shift.clone(), b.running});
    return copy;
}

void validate_plan(std::span<const std::size_t> plan) {
    require(plan.size() == kBlocks + 1, ErrorCode::invalid_plan,
            "channel plan needs input channels plus four block widths, got " + std::to_string(plan.size()) + " entries");
    for (auto c : plan) require(c >= 1, ErrorCode::invalid_plan, "channel plan entries must be positive");
}

BackboneParams init_backbone(std::span<const std::size_t> plan, std::uint64_t seed) {
    validate_plan(plan);
    BackboneParams params{ChannelPlan(plan.begin(), plan.end()), {}};
    Rng rng(seed);
    for (std::size_t b = 0; b < kBlocks; ++b) {
        const std::size_t in = plan[b], out = plan[b + 1];
        const double bound = 1.0 / std::sqrt(static_cast<double>(in * kKernel * kKernel));
        std::vector<double> w(out * in * kKernel * kKernel);
        for (auto& v : w) v = rng.uniform(-bound, bound);
        params.blocks.push_back({ad::Tensor({out, in, kKernel, kKernel}, std::move(w), true),
                                 ad::Tensor::ones({out}, true), ad::Tensor::zeros({out}, true),
                                 ad::BatchNormStats::identity(out)});
    }
    return params;
}

ad::Tensor extract_features(const BackboneParams& params, const ad::Tensor& images, Mode mode,
                            BackboneParams* update) {
    if (update != nullptr)
        require(update->blocks.size() == params.blocks.size(), ErrorCode::shape_mismatch,
                "statistics target has a different block count");
    return run(params, images, mode, mode == Mode::train ? update : nullptr);
}

}  // namespace tdm
