#pragma once

#include <cstddef>
#include <vector>

#include "tdm/backbone.hpp"
#include "tdm/data.hpp"
#include "tdm/metric.hpp"
#include "tdm/tdm.hpp"

namespace tdm {

/// Backbone, attention modules and metric: everything a checkpoint restores.
struct Model {
    BackboneParams backbone;
    TdmParams tdm;
    Metric metric;

    std::vector<ad::Tensor> parameters() const;
    Model clone() const;
};

/// Feature maps of one episode's images.
struct EpisodeFeatures {
    ad::Tensor support;  // (N·K)×C×h×w, grouped by label
    ad::Tensor query;    // (N·U)×C×h×w
};

struct EpisodeResult {
    ad::Tensor prototypes;  // N×C×h×w raw
    TdmOutputs weights;
    ad::Tensor distances;   // Q×N
    EpisodePrediction prediction;
    ad::Tensor loss;        // scalar, only when labels were supplied
};

/// Support and query images go through the backbone as one batch; `update`
/// receives train-mode running statistics.
EpisodeFeatures episode_features(const Model& model, const data::DatasetSplit& split, const data::Episode& episode,
                                 Mode mode, Model* update = nullptr);

/// Prototypes → TDM → task-adapted distances → probabilities. Train mode draws
/// weight noise from `noise` and updates running statistics in `update`.
EpisodeResult run_head(const Model& model, const EpisodeFeatures& features, const data::EpisodeSpec& spec,
                       std::span<const std::size_t> query_labels, Mode mode, Rng* noise = nullptr,
                       Model* update = nullptr);

/// The same episode through a plain prototype head on raw features.
EpisodePrediction protonet_head(const EpisodeFeatures& features, const data::EpisodeSpec& spec, const Metric& metric);

}  // namespace tdm
