#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tdm/ops.hpp"
#include "tdm/rng.hpp"
#include "tdm/tensor.hpp"

namespace tdm {

enum class PoolMode { avg, max };

// Feature maps are C×H×W; batched variants carry leading batch axes.

/// Element-wise mean of K same-shaped maps. Throws EmptySupport / ShapeMismatch.
ad::Tensor prototype(std::span<const ad::Tensor> maps);
/// Support batch (N·K)×C×H×W grouped by label → N×C×H×W class prototypes.
ad::Tensor prototypes(const ad::Tensor& support, std::size_t n_way, std::size_t k_shot);

/// Mean (or max) over the channel axis: ...×C×H×W → ...×H×W.
ad::Tensor spatial_pool(const ad::Tensor& maps, PoolMode mode);

/// Per-channel mean squared deviation from the pooled map.
/// C×H×W with H×W → C, or B×C×H×W with B×H×W → B×C.
ad::Tensor intra_score(const ad::Tensor& maps, const ad::Tensor& pooled);

/// N×C×H×W prototypes with their N×H×W pooled maps → N×C, where row i holds
/// min over j != i of the mean squared deviation of channel c of i from pooled j.
/// Throws SingleClass for N < 2.
ad::Tensor inter_scores(const ad::Tensor& prototypes, const ad::Tensor& pooled);
/// Row `class_index` of inter_scores.
ad::Tensor inter_score(const ad::Tensor& prototypes, const ad::Tensor& pooled, std::size_t class_index);

/// Linear(C→2C) → batchnorm → relu → Linear(2C→C) → 1 + tanh.
struct FcBlockParams {
    ad::Tensor w1;  // C×2C
    ad::Tensor b1;  // 2C
    ad::Tensor bn_scale;
    ad::Tensor bn_shift;
    ad::BatchNormStats running;
    ad::Tensor w2;  // 2C×C
    ad::Tensor b2;  // C

    std::size_t channels() const { return w1.dim(0); }
    std::vector<ad::Tensor> parameters() const { return {w1, b1, bn_scale, bn_shift, w2, b2}; }
    FcBlockParams clone() const;
};

/// First layer uniform in ±1/sqrt(C); second layer zero so the block starts at 1.
FcBlockParams init_fc_block(std::size_t channels, Rng& rng);

/// B×C scores → B×C weights in (0,2). Train mode uses batch moments and, when
/// `update` is given, folds them into it.
ad::Tensor fc_block_forward(const FcBlockParams& params, const ad::Tensor& scores, Mode mode,
                            ad::BatchNormStats* update = nullptr);

struct TdmOptions {
    double alpha = 0.5;
    double beta = 0.5;
    double noise_amplitude = 0.2;
    PoolMode pool = PoolMode::avg;
    bool sam = true;
    bool qam = true;

    /// Throws InvalidConfig unless alpha, beta are in [0,1] and the amplitude is >= 0.
    void validate() const;
};

struct TdmParams {
    FcBlockParams intra;
    FcBlockParams inter;
    FcBlockParams query;
    TdmOptions options;

    std::size_t channels() const { return intra.channels(); }
    std::vector<ad::Tensor> parameters() const;
    TdmParams clone() const;
};

TdmParams init_tdm(std::size_t channels, const TdmOptions& options, std::uint64_t seed);

/// α·b_intra(intra) + (1−α)·b_inter(inter), batched over the N classes. A
/// non-null `params` in train mode receives the running-statistic updates.
ad::Tensor support_weights(const TdmParams& tdm, const ad::Tensor& intra, const ad::Tensor& inter, Mode mode,
                           TdmParams* update = nullptr);

/// b_Q applied to the intra score of each raw query map: Q×C×H×W → Q×C.
ad::Tensor query_weights(const TdmParams& tdm, const ad::Tensor& query_maps, Mode mode, TdmParams* update = nullptr);

/// Q×N×C task weights β·w^S_i + (1−β)·w^Q_q. Train mode adds i.i.d. uniform
/// noise of the configured amplitude drawn from `rng`.
ad::Tensor task_weights(const TdmOptions& options, const ad::Tensor& w_support, const ad::Tensor& w_query, Mode mode,
                        Rng* rng = nullptr);

/// Per-element noise tensor used by task_weights in train mode.
ad::Tensor task_noise(const ad::Shape& shape, double amplitude, Rng& rng);

/// Channel-wise scaling; `weight` covers the leading axes of `maps` up to C.
ad::Tensor apply_weights(const ad::Tensor& weight, const ad::Tensor& maps);

/// Everything the attention modules produce for one episode.
struct TdmOutputs {
    ad::Tensor intra;     // N×C scores
    ad::Tensor inter;     // N×C scores
    ad::Tensor query_intra;  // Q×C scores
    ad::Tensor w_intra;   // N×C
    ad::Tensor w_inter;   // N×C
    ad::Tensor w_support;  // N×C
    ad::Tensor w_query;   // Q×C
    ad::Tensor w_task;    // Q×N×C
};

/// Full SAM + QAM + blending on N×C×H×W prototypes and Q×C×H×W raw queries.
/// Disabled modules contribute all-ones weights.
TdmOutputs tdm_forward(const TdmParams& tdm, const ad::Tensor& prototypes, const ad::Tensor& queries, Mode mode,
                       Rng* rng = nullptr, TdmParams* update = nullptr);

struct ChannelVarianceReport {
    std::vector<std::vector<double>> variance;  // per class, per channel
    std::vector<std::vector<bool>> keep;        // false where the channel is dropped
};

/// Per class, per channel: mean over instances and positions of the squared
/// deviation from the class mean map. Drops the floor(drop_fraction·C)
/// highest-variance channels (only those with nonzero variance).
/// Throws InsufficientInstances when a class has fewer than two maps.
ChannelVarianceReport channel_variance_diagnostic(const std::vector<std::vector<ad::Tensor>>& class_maps,
                                                  double drop_fraction);

}  // namespace tdm
