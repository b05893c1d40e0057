#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tdm/tensor.hpp"

namespace tdm {

enum class MetricKind { squared_euclidean, cosine };

struct Metric {
    MetricKind kind = MetricKind::squared_euclidean;
    double temperature = 1.0;

    /// Throws InvalidConfig unless the temperature is positive and finite.
    void validate() const;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// Squared Euclidean distance normalized by H·W, or 1 − cosine similarity of
/// the flattened maps. Throws ShapeMismatch, ZeroVector (cosine only).
double pairwise_distance(const ad::Tensor& a, const ad::Tensor& b, MetricKind kind);

/// Q×N×C×H×W prototypes and queries (pair (q, i) both transformed by the
/// task weight of class i for query q) → Q×N distances.
ad::Tensor class_distances(const ad::Tensor& protos, const ad::Tensor& queries, MetricKind kind);

/// Distances of every raw query to every raw prototype: the plain prototype head.
ad::Tensor protonet_distances(const ad::Tensor& protos, const ad::Tensor& queries, MetricKind kind);

struct EpisodePrediction {
    ad::Tensor probabilities;  // Q×N
    std::vector<std::size_t> labels;
};

/// softmax(−d/τ) per query row with argmax labels (first index on ties).
EpisodePrediction classify_distances(const ad::Tensor& distances, const Metric& metric);

/// Mean over queries of −log p(true label), probabilities clamped to [1e-12, 1 − 1e-12].
/// Throws LabelOutOfRange.
ad::Tensor episode_loss(const ad::Tensor& probabilities, std::span<const std::size_t> labels);

}  // namespace tdm
