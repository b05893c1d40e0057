#include "tdm/metric.hpp"

#include <cmath>
#include <string>

#include "tdm/ops.hpp"

namespace tdm {

using ad::Tensor;

void Metric::validate() const {
    require(temperature > 0.0 && std::isfinite(temperature), ErrorCode::invalid_config,
            "temperature must be positive");
}

double pairwise_distance(const Tensor& a, const Tensor& b, MetricKind kind) {
    require(a.shape() == b.shape() && a.rank() == 3, ErrorCode::shape_mismatch,
            "pairwise_distance expects two C×H×W maps, got " + ad::shape_string(a.shape()) + " and " +
                ad::shape_string(b.shape()));
    ad::Shape s{1, 1};
    s.insert(s.end(), a.shape().begin(), a.shape().end());
    return class_distances(ad::reshape(a, s), ad::reshape(b, s), kind).item();
}

Tensor class_distances(const Tensor& protos, const Tensor& queries, MetricKind kind) {
    require(protos.rank() == 5 && protos.shape() == queries.shape(), ErrorCode::shape_mismatch,
            "class_distances expects matching Q×N×C×H×W inputs, got " + ad::shape_string(protos.shape()) + " and " +
                ad::shape_string(queries.shape()));
    const auto& s = protos.shape();
    const std::size_t q = s[0], n = s[1], c = s[2], hw = s[3] * s[4];
    const Tensor a = ad::reshape(protos, {q, n, c * hw});
    const Tensor b = ad::reshape(queries, {q, n, c * hw});

    if (kind == MetricKind::squared_euclidean)
        return ad::scale(ad::mean_over_axis(ad::squared_difference(a, b), 2), static_cast<double>(c));

    const Tensor aa = ad::mean_over_axis(ad::mul(a, a), 2);
    const Tensor bb = ad::mean_over_axis(ad::mul(b, b), 2);
    require(aa.values().minCoeff() > 0.0 && bb.values().minCoeff() > 0.0, ErrorCode::zero_vector,
            "cosine distance of an all-zero feature map");
    const Tensor ab = ad::mean_over_axis(ad::mul(a, b), 2);
    return ad::add_scalar(ad::scale(ad::div(ab, ad::sqrt(ad::mul(aa, bb))), -1.0), 1.0);
}

Tensor protonet_distances(const Tensor& protos, const Tensor& queries, MetricKind kind) {
    require(protos.rank() == 4 && queries.rank() == 4, ErrorCode::shape_mismatch,
            "protonet_distances expects N×C×H×W prototypes and Q×C×H×W queries");
    return class_distances(ad::expand(protos, 0, queries.dim(0)), ad::expand(queries, 1, protos.dim(0)), kind);
}

EpisodePrediction classify_distances(const Tensor& distances, const Metric& metric) {
    metric.validate();
    require(distances.rank() == 2, ErrorCode::shape_mismatch, "distances must be Q×N");
    EpisodePrediction pred;
    pred.probabilities = ad::softmax_over_axis(ad::scale(distances, -1.0 / metric.temperature), 1);
    const std::size_t q = distances.dim(0), n = distances.dim(1);
    const auto& p = pred.probabilities.values();
    pred.labels.resize(q);
    for (std::size_t i = 0; i < q; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < n; ++j)
            if (p[static_cast<Eigen::Index>(i * n + j)] > p[static_cast<Eigen::Index>(i * n + best)]) best = j;
        pred.labels[i] = best;
    }
    return pred;
}

Tensor episode_loss(const Tensor& probabilities, std::span<const std::size_t> labels) {
    require(probabilities.rank() == 2 && probabilities.dim(0) == labels.size(), ErrorCode::shape_mismatch,
            "need one label per query row");
    const std::size_t n = probabilities.dim(1);
    std::vector<std::size_t> flat(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] < n, ErrorCode::label_out_of_range,
                "label " + std::to_string(labels[i]) + " outside 0.." + std::to_string(n - 1));
        flat[i] = i * n + labels[i];
    }
    const Tensor picked = ad::index_select(ad::reshape(probabilities, {probabilities.size()}), 0, flat);
    const Tensor nll = ad::scale(ad::mean_over_axis(ad::log_clamped(picked, kProbabilityFloor, 1.0 - kProbabilityFloor), 0), -1.0);
    return ad::reshape(nll, {1});
}

}  // namespace tdm
