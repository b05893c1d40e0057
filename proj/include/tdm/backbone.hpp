#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tdm/ops.hpp"
#include "tdm/tensor.hpp"

namespace tdm {

/// Input channels followed by the output width of each of the four blocks.
using ChannelPlan = std::vector<std::size_t>;

inline const ChannelPlan kDefaultPlan{3, 16, 16, 16, 32};

struct ConvBlock {
    ad::Tensor kernel;    // O×I×3×3
    ad::Tensor bn_scale;  // O
    ad::Tensor bn_shift;  // O
    ad::BatchNormStats running;
};

/// Conv-4 style extractor: four (conv3×3 pad 1, batchnorm, relu, maxpool 2×2) blocks.
struct BackboneParams {
    ChannelPlan plan;
    std::vector<ConvBlock> blocks;

    std::size_t out_channels() const { return plan.back(); }
    /// Trainable leaves in a fixed order (kernel, scale, shift per block).
    std::vector<ad::Tensor> parameters() const;
    /// Deep copy; plain copies share parameter storage.
    BackboneParams clone() const;
};

/// Throws InvalidPlan unless the plan has five positive entries.
void validate_plan(std::span<const std::size_t> plan);

BackboneParams init_backbone(std::span<const std::size_t> plan, std::uint64_t seed);

/// B×C_in×H×W → B×c4×(H/16)×(W/16). Train mode normalizes with batch moments
/// and, when `update` is given (it may be `&params`), folds them into its
/// running statistics. Eval mode never writes anything.
ad::Tensor extract_features(const BackboneParams& params, const ad::Tensor& images, Mode mode,
                            BackboneParams* update = nullptr);

}  // namespace tdm
