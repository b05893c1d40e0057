#include "tdm/tdm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace tdm {

namespace {

using ad::Tensor;

Tensor ones_like_rows(std::size_t rows, std::size_t channels) { return Tensor::ones({rows, channels}); }

/// min over axis 1, written through max so only existing kinds are used.
Tensor min_over_axis1(const Tensor& x) { return ad::scale(ad::max_over_axis(ad::scale(x, -1.0), 1), -1.0); }

Tensor blend(const Tensor& a, const Tensor& b, double t) { return ad::add(ad::scale(a, t), ad::scale(b, 1.0 - t)); }

}  // namespace

Tensor prototype(std::span<const Tensor> maps) {
    require(!maps.empty(), ErrorCode::empty_support, "prototype of zero support maps");
    Tensor acc = maps.front();
    for (std::size_t k = 1; k < maps.size(); ++k) {
        require(maps[k].shape() == acc.shape(), ErrorCode::shape_mismatch,
                "support maps differ in shape: " + ad::shape_string(maps[k].shape()) + " vs " +
                    ad::shape_string(acc.shape()));
        acc = ad::add(acc, maps[k]);
    }
    return ad::scale(acc, 1.0 / static_cast<double>(maps.size()));
}

Tensor prototypes(const Tensor& support, std::size_t n_way, std::size_t k_shot) {
    require(k_shot >= 1 && n_way >= 1, ErrorCode::empty_support, "prototypes need at least one support map per class");
    require(support.rank() == 4 && support.dim(0) == n_way * k_shot, ErrorCode::shape_mismatch,
            "support batch " + ad::shape_string(support.shape()) + " is not (N·K)×C×H×W");
    const auto& s = support.shape();
    return ad::mean_over_axis(ad::reshape(support, {n_way, k_shot, s[1], s[2], s[3]}), 1);
}

Tensor spatial_pool(const Tensor& maps, PoolMode mode) {
    require(maps.rank() >= 3, ErrorCode::shape_mismatch, "spatial_pool expects ...×C×H×W");
    const std::size_t axis = maps.rank() - 3;
    return mode == PoolMode::avg ? ad::mean_over_axis(maps, axis) : ad::max_over_axis(maps, axis);
}

Tensor intra_score(const Tensor& maps, const Tensor& pooled) {
    require(maps.rank() == 3 || maps.rank() == 4, ErrorCode::shape_mismatch, "intra_score expects C×H×W or B×C×H×W");
    const bool batched = maps.rank() == 4;
    const std::size_t b = batched ? maps.dim(0) : 1;
    const std::size_t c = maps.dim(maps.rank() - 3);
    const std::size_t h = maps.dim(maps.rank() - 2), w = maps.dim(maps.rank() - 1);
    ad::Shape expected = batched ? ad::Shape{b, h, w} : ad::Shape{h, w};
    require(pooled.shape() == expected, ErrorCode::shape_mismatch,
            "pooled map " + ad::shape_string(pooled.shape()) + " does not match " + ad::shape_string(expected));

    const Tensor f = ad::reshape(maps, {b, c, h * w});
    const Tensor m = ad::expand(ad::reshape(pooled, {b, h * w}), 1, c);
    const Tensor score = ad::mean_over_axis(ad::squared_difference(f, m), 2);
    return batched ? score : ad::reshape(score, {c});
}

Tensor inter_scores(const Tensor& protos, const Tensor& pooled) {
    require(protos.rank() == 4, ErrorCode::shape_mismatch, "inter_scores expects N×C×H×W prototypes");
    const std::size_t n = protos.dim(0), c = protos.dim(1), h = protos.dim(2), w = protos.dim(3);
    require(n >= 2, ErrorCode::single_class, "inter score needs at least two classes");
    require(pooled.shape() == ad::Shape{n, h, w}, ErrorCode::shape_mismatch,
            "pooled maps " + ad::shape_string(pooled.shape()) + " do not match prototypes");

    // d[i, j, c] = mean over positions of (P_i,c - M_j)^2
    const Tensor p = ad::expand(ad::reshape(protos, {n, c, h * w}), 1, n);
    const Tensor m = ad::expand(ad::expand(ad::reshape(pooled, {n, h * w}), 1, c), 0, n);
    const Tensor d = ad::reshape(ad::mean_over_axis(ad::squared_difference(p, m), 3), {n * n, c});

    std::vector<std::size_t> off_diagonal;
    off_diagonal.reserve(n * (n - 1));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) off_diagonal.push_back(i * n + j);
    return min_over_axis1(ad::reshape(ad::index_select(d, 0, off_diagonal), {n, n - 1, c}));
}

Tensor inter_score(const Tensor& protos, const Tensor& pooled, std::size_t class_index) {
    const Tensor all = inter_scores(protos, pooled);
    require(class_index < all.dim(0), ErrorCode::shape_mismatch, "class index out of range");
    const std::size_t row[] = {class_index};
    return ad::reshape(ad::index_select(all, 0, row), {all.dim(1)});
}

FcBlockParams FcBlockParams::clone() const {
    return {w1.clone(), b1.clone(), bn_scale.clone(), bn_shift.clone(), running, w2.clone(), b2.clone()};
}

FcBlockParams init_fc_block(std::size_t channels, Rng& rng) {
    require(channels >= 1, ErrorCode::shape_mismatch, "FC block needs at least one channel");
    const std::size_t hidden = 2 * channels;
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    auto uniform = [&](std::size_t count) {
        std::vector<double> v(count);
        for (auto& x : v) x = rng.uniform(-bound, bound);
        return v;
    };
    FcBlockParams p;
    p.w1 = Tensor({channels, hidden}, uniform(channels * hidden), true);
    p.b1 = Tensor({hidden}, uniform(hidden), true);
    p.bn_scale = Tensor::ones({hidden}, true);
    p.bn_shift = Tensor::zeros({hidden}, true);
    p.running = ad::BatchNormStats::identity(hidden);
    p.w2 = Tensor::zeros({hidden, channels}, true);
    p.b2 = Tensor::zeros({channels}, true);
    return p;
}

Tensor fc_block_forward(const FcBlockParams& params, const Tensor& scores, Mode mode, ad::BatchNormStats* update) {
    require(scores.rank() == 2 && scores.dim(1) == params.channels(), ErrorCode::shape_mismatch,
            "FC block for C=" + std::to_string(params.channels()) + " got scores " + ad::shape_string(scores.shape()));
    Tensor h = ad::bias_add(ad::matmul(scores, params.w1), params.b1);
    h = ad::relu(ad::batchnorm1d(h, params.bn_scale, params.bn_shift, params.running, mode, ad::kBatchNormEpsilon,
                                 mode == Mode::train ? update : nullptr));
    return ad::add_scalar(ad::tanh(ad::bias_add(ad::matmul(h, params.w2), params.b2)), 1.0);
}

void TdmOptions::validate() const {
    require(alpha >= 0.0 && alpha <= 1.0, ErrorCode::invalid_config, "alpha must lie in [0,1]");
    require(beta >= 0.0 && beta <= 1.0, ErrorCode::invalid_config, "beta must lie in [0,1]");
    require(noise_amplitude >= 0.0 && std::isfinite(noise_amplitude), ErrorCode::invalid_config,
            "noise amplitude must be >= 0");
}

std::vector<Tensor> TdmParams::parameters() const {
    std::vector<Tensor> out;
    for (const auto* block : {&intra, &inter, &query})
        for (auto& t : block->parameters()) out.push_back(t);
    return out;
}

TdmParams TdmParams::clone() const { return {intra.clone(), inter.clone(), query.clone(), options}; }

TdmParams init_tdm(std::size_t channels, const TdmOptions& options, std::uint64_t seed) {
    options.validate();
    Rng rng(seed);
    TdmParams p;
    p.intra = init_fc_block(channels, rng);
    p.inter = init_fc_block(channels, rng);
    p.query = init_fc_block(channels, rng);
    p.options = options;
    return p;
}

Tensor support_weights(const TdmParams& tdm, const Tensor& intra, const Tensor& inter, Mode mode, TdmParams* update) {
    const Tensor a = fc_block_forward(tdm.intra, intra, mode, update ? &update->intra.running : nullptr);
    const Tensor b = fc_block_forward(tdm.inter, inter, mode, update ? &update->inter.running : nullptr);
    return blend(a, b, tdm.options.alpha);
}

Tensor query_weights(const TdmParams& tdm, const Tensor& query_maps, Mode mode, TdmParams* update) {
    const Tensor scores = intra_score(query_maps, spatial_pool(query_maps, tdm.options.pool));
    return fc_block_forward(tdm.query, scores, mode, update ? &update->query.running : nullptr);
}

Tensor task_noise(const ad::Shape& shape, double amplitude, Rng& rng) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(ad::numel(shape)));
    for (auto& x : v) x = rng.uniform(-amplitude, amplitude);
    return Tensor::from_values(shape, std::move(v));
}

Tensor task_weights(const TdmOptions& options, const Tensor& w_support, const Tensor& w_query, Mode mode, Rng* rng) {
    require(w_support.rank() == 2 && w_query.rank() == 2 && w_support.dim(1) == w_query.dim(1),
            ErrorCode::shape_mismatch,
            "task weights need N×C support and Q×C query weights, got " + ad::shape_string(w_support.shape()) +
                " and " + ad::shape_string(w_query.shape()));
    const std::size_t q = w_query.dim(0), n = w_support.dim(0);
    Tensor w = blend(ad::expand(w_support, 0, q), ad::expand(w_query, 1, n), options.beta);
    if (mode == Mode::train && options.noise_amplitude > 0.0) {
        require(rng != nullptr, ErrorCode::invalid_config, "training-mode task weights need a random stream");
        w = ad::add(w, task_noise(w.shape(), options.noise_amplitude, *rng));
    }
    return w;
}

Tensor apply_weights(const Tensor& weight, const Tensor& maps) {
    require(maps.rank() == weight.rank() + 2, ErrorCode::shape_mismatch,
            "weight " + ad::shape_string(weight.shape()) + " does not cover the channels of " +
                ad::shape_string(maps.shape()));
    return ad::channel_scale(maps, weight);
}

TdmOutputs tdm_forward(const TdmParams& tdm, const Tensor& protos, const Tensor& queries, Mode mode, Rng* rng,
                       TdmParams* update) {
    require(protos.rank() == 4 && queries.rank() == 4 && protos.dim(1) == tdm.channels() &&
                queries.dim(1) == tdm.channels(),
            ErrorCode::shape_mismatch, "TDM for C=" + std::to_string(tdm.channels()) + " got prototypes " +
                                           ad::shape_string(protos.shape()) + " and queries " +
                                           ad::shape_string(queries.shape()));
    const auto& opt = tdm.options;
    const std::size_t n = protos.dim(0), q = queries.dim(0), c = tdm.channels();
    const bool train_update = mode == Mode::train && update != nullptr;

    TdmOutputs out;
    const Tensor pooled = spatial_pool(protos, opt.pool);
    out.intra = intra_score(protos, pooled);
    out.inter = inter_scores(protos, pooled);
    out.query_intra = intra_score(queries, spatial_pool(queries, opt.pool));

    if (opt.sam) {
        out.w_intra = fc_block_forward(tdm.intra, out.intra, mode, train_update ? &update->intra.running : nullptr);
        out.w_inter = fc_block_forward(tdm.inter, out.inter, mode, train_update ? &update->inter.running : nullptr);
        out.w_support = blend(out.w_intra, out.w_inter, opt.alpha);
    } else {
        out.w_intra = out.w_inter = out.w_support = ones_like_rows(n, c);
    }
    out.w_query = opt.qam ? fc_block_forward(tdm.query, out.query_intra, mode,
                                             train_update ? &update->query.running : nullptr)
                          : ones_like_rows(q, c);
    // With both modules off the model is the plain prototype head: no noise either.
    const Mode blend_mode = (opt.sam || opt.qam) ? mode : Mode::eval;
    out.w_task = task_weights(opt, out.w_support, out.w_query, blend_mode, rng);
    return out;
}

ChannelVarianceReport channel_variance_diagnostic(const std::vector<std::vector<Tensor>>& class_maps,
                                                  double drop_fraction) {
    require(drop_fraction >= 0.0 && drop_fraction < 1.0, ErrorCode::invalid_spec, "drop fraction must be in [0,1)");
    ChannelVarianceReport report;
    for (const auto& maps : class_maps) {
        require(maps.size() >= 2, ErrorCode::insufficient_instances, "channel variance needs two maps per class");
        const auto& shape = maps.front().shape();
        require(shape.size() == 3, ErrorCode::shape_mismatch, "feature maps must be C×H×W");
        const std::size_t c = shape[0], hw = shape[1] * shape[2];
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c * hw));
        for (const auto& m : maps) {
            require(m.shape() == shape, ErrorCode::shape_mismatch, "feature maps of one class differ in shape");
            mean += m.values();
        }
        mean /= static_cast<double>(maps.size());

        std::vector<double> var(c, 0.0);
        for (const auto& m : maps)
            for (std::size_t ch = 0; ch < c; ++ch) {
                const auto seg = static_cast<Eigen::Index>(ch * hw);
                const auto len = static_cast<Eigen::Index>(hw);
                var[ch] += (m.values().segment(seg, len) - mean.segment(seg, len)).squaredNorm();
            }
        for (auto& v : var) v /= static_cast<double>(maps.size() * hw);

        std::vector<std::size_t> order(c);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return var[a] > var[b]; });
        const auto drop = static_cast<std::size_t>(std::floor(drop_fraction * static_cast<double>(c) + 1e-9));
        std::vector<bool> keep(c, true);
        for (std::size_t k = 0; k < drop && var[order[k]] > 0.0; ++k) keep[order[k]] = false;

        report.variance.push_back(std::move(var));
        report.keep.push_back(std::move(keep));
    }
    return report;
}

}  // namespace tdm
