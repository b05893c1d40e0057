#include "tdm/model.hpp"

namespace tdm {

namespace {

EpisodeFeatures split_features(const ad::Tensor& all, const data::Episode& episode) {
    const std::size_t s = episode.support_ids.size(), q = episode.query_ids.size();
    std::vector<std::size_t> support(s), query(q);
    for (std::size_t i = 0; i < s; ++i) support[i] = i;
    for (std::size_t i = 0; i < q; ++i) query[i] = s + i;
    return {ad::index_select(all, 0, support), ad::index_select(all, 0, query)};
}

ad::Tensor episode_images(const data::DatasetSplit& split, const data::Episode& episode) {
    std::vector<std::size_t> ids(episode.support_ids);
    ids.insert(ids.end(), episode.query_ids.begin(), episode.query_ids.end());
    return data::image_batch(split, ids);
}

}  // namespace

std::vector<ad::Tensor> Model::parameters() const {
    auto out = backbone.parameters();
    for (auto& t : tdm.parameters()) out.push_back(t);
    return out;
}

Model Model::clone() const { return {backbone.clone(), tdm.clone(), metric}; }

EpisodeFeatures episode_features(const Model& model, const data::DatasetSplit& split, const data::Episode& episode,
                                 Mode mode, Model* update) {
    return split_features(
        extract_features(model.backbone, episode_images(split, episode), mode, update ? &update->backbone : nullptr),
        episode);
}

EpisodeResult run_head(const Model& model, const EpisodeFeatures& features, const data::EpisodeSpec& spec,
                       std::span<const std::size_t> query_labels, Mode mode, Rng* noise, Model* update) {
    EpisodeResult r;
    r.prototypes = prototypes(features.support, spec.n_way, spec.k_shot);
    r.weights = tdm_forward(model.tdm, r.prototypes, features.query, mode, noise, update ? &update->tdm : nullptr);

    const std::size_t q = features.query.dim(0), n = spec.n_way;
    ad::Tensor protos = ad::expand(r.prototypes, 0, q);
    ad::Tensor queries = ad::expand(features.query, 1, n);
    if (model.tdm.options.sam || model.tdm.options.qam) {
        protos = apply_weights(r.weights.w_task, protos);
        queries = apply_weights(r.weights.w_task, queries);
    }
    r.distances = class_distances(protos, queries, model.metric.kind);
    r.prediction = classify_distances(r.distances, model.metric);
    if (!query_labels.empty()) r.loss = episode_loss(r.prediction.probabilities, query_labels);
    return r;
}

EpisodePrediction protonet_head(const EpisodeFeatures& features, const data::EpisodeSpec& spec, const Metric& metric) {
    const auto protos = prototypes(features.support, spec.n_way, spec.k_shot);
    return classify_distances(protonet_distances(protos, features.query, metric.kind), metric);
}

}  // namespace tdm
