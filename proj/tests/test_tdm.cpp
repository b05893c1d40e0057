#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tdm/tdm.hpp"

using namespace tdm;
using ad::Tensor;
using tdm::test::error_code_of;
using tdm::test::random_tensor;

namespace {

// Independent loop implementations of the score formulas on raw arrays.
struct Maps {
    std::size_t n, c, h, w;
    std::vector<double> v;  // n×c×h×w
    double at(std::size_t i, std::size_t ch, std::size_t y, std::size_t x) const { return v[((i * c + ch) * h + y) * w + x]; }
};

double pooled_at(const Maps& m, std::size_t i, std::size_t y, std::size_t x, PoolMode mode) {
    double acc = mode == PoolMode::avg ? 0.0 : -std::numeric_limits<double>::infinity();
    for (std::size_t ch = 0; ch < m.c; ++ch)
        acc = mode == PoolMode::avg ? acc + m.at(i, ch, y, x) : std::max(acc, m.at(i, ch, y, x));
    return mode == PoolMode::avg ? acc / static_cast<double>(m.c) : acc;
}

double deviation(const Maps& m, std::size_t i, std::size_t ch, std::size_t j, PoolMode mode) {
    double s = 0.0;
    for (std::size_t y = 0; y < m.h; ++y)
        for (std::size_t x = 0; x < m.w; ++x) {
            const double d = m.at(i, ch, y, x) - pooled_at(m, j, y, x, mode);
            s += d * d;
        }
    return s / static_cast<double>(m.h * m.w);
}

double brute_intra(const Maps& m, std::size_t i, std::size_t ch, PoolMode mode) { return deviation(m, i, ch, i, mode); }

double brute_inter(const Maps& m, std::size_t i, std::size_t ch, PoolMode mode) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m.n; ++j)
        if (j != i) best = std::min(best, deviation(m, i, ch, j, mode));
    return best;
}

Tensor map(std::initializer_list<double> values, std::size_t c, std::size_t h = 1, std::size_t w = 1) {
    return Tensor({c, h, w}, std::vector<double>(values));
}

FcBlockParams random_block(std::size_t c, std::mt19937_64& gen, double spread = 1.0) {
    Rng rng(gen());
    auto p = init_fc_block(c, rng);
    p.w2 = random_tensor(gen, {2 * c, c}, -spread, spread, true);
    p.b2 = random_tensor(gen, {c}, -spread, spread, true);
    return p;
}

}  // namespace

TEST(Prototype, SingleMapIsIdentity) {
    std::mt19937_64 gen(1);
    const auto m = random_tensor(gen, {32, 4, 4});
    const Tensor maps[] = {m};
    EXPECT_EQ(prototype(maps).values(), m.values());
}

TEST(Prototype, HandMean) {
    const Tensor maps[] = {map({2}, 1), map({0}, 1)};
    EXPECT_EQ(prototype(maps)[0], 1.0);
}

TEST(Prototype, ShapePreservedAndErrors) {
    std::mt19937_64 gen(2);
    const Tensor maps[] = {random_tensor(gen, {32, 4, 4}), random_tensor(gen, {32, 4, 4})};
    EXPECT_EQ(prototype(maps).shape(), (ad::Shape{32, 4, 4}));
    EXPECT_EQ(error_code_of([] { prototype({}); }), ErrorCode::empty_support);
    const Tensor bad[] = {random_tensor(gen, {2, 4, 4}), random_tensor(gen, {2, 4, 3})};
    EXPECT_EQ(error_code_of([&] { prototype(bad); }), ErrorCode::shape_mismatch);
}

TEST(Prototype, BatchedMatchesPerClass) {
    std::mt19937_64 gen(3);
    const auto support = random_tensor(gen, {6, 2, 3, 3});  // N=2, K=3
    const auto p = prototypes(support, 2, 3);
    for (std::size_t cls = 0; cls < 2; ++cls) {
        std::vector<double> acc(18, 0.0);
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t e = 0; e < 18; ++e) acc[e] += support[(cls * 3 + k) * 18 + e];
        for (std::size_t e = 0; e < 18; ++e) EXPECT_NEAR(p[cls * 18 + e], acc[e] / 3.0, 1e-14);
    }
    EXPECT_EQ(error_code_of([&] { prototypes(support, 2, 0); }), ErrorCode::empty_support);
}

TEST(SpatialPool, IdenticalChannels) {
    const auto m = Tensor({3, 1, 2}, {1, -2, 1, -2, 1, -2});
    for (auto mode : {PoolMode::avg, PoolMode::max}) {
        const auto p = spatial_pool(m, mode);
        EXPECT_EQ(p.shape(), (ad::Shape{1, 2}));
        EXPECT_EQ(p[0], 1.0);
        EXPECT_EQ(p[1], -2.0);
    }
}

TEST(SpatialPool, HandAvgAndMax) {
    const auto m = map({2, 0}, 2);
    EXPECT_EQ(spatial_pool(m, PoolMode::avg)[0], 1.0);
    EXPECT_EQ(spatial_pool(m, PoolMode::max)[0], 2.0);
}

TEST(SpatialPool, AvgIsLinear) {
    std::mt19937_64 gen(4);
    const auto m = random_tensor(gen, {5, 3, 3});
    const auto lhs = spatial_pool(ad::scale(m, 3.0), PoolMode::avg);
    const auto rhs = ad::scale(spatial_pool(m, PoolMode::avg), 3.0);
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-14);
}

TEST(IntraScore, ChannelEqualToPooledScoresZero) {
    const auto m = Tensor({2, 1, 2}, {1, 2, 1, 2});
    const auto s = intra_score(m, spatial_pool(m, PoolMode::avg));
    EXPECT_EQ(s[0], 0.0);
    EXPECT_EQ(s[1], 0.0);
}

TEST(IntraScore, HandExample) {
    const auto s = intra_score(map({2, 0}, 2), Tensor({1, 1}, {1}));
    EXPECT_EQ(s.shape(), (ad::Shape{2}));
    EXPECT_EQ(s[0], 1.0);
    EXPECT_EQ(s[1], 1.0);
}

TEST(IntraScore, NonNegativeAndShapeChecked) {
    std::mt19937_64 gen(5);
    for (int t = 0; t < 100; ++t) {
        const auto m = random_tensor(gen, {4, 3, 2});
        const auto s = intra_score(m, spatial_pool(m, t % 2 ? PoolMode::max : PoolMode::avg));
        EXPECT_GE(s.values().minCoeff(), 0.0);
    }
    EXPECT_EQ(error_code_of([] { intra_score(Tensor::zeros({2, 2, 2}), Tensor::zeros({2, 3})); }),
              ErrorCode::shape_mismatch);
}

TEST(InterScore, HandExample) {
    const auto protos = Tensor({2, 1, 1, 1}, {2, 0});
    const auto s = inter_score(protos, spatial_pool(protos, PoolMode::avg), 0);
    EXPECT_EQ(s.shape(), (ad::Shape{1}));
    EXPECT_EQ(s[0], 4.0);
}

TEST(InterScore, DuplicateClassGivesIntra) {
    std::mt19937_64 gen(6);
    const auto one = random_tensor(gen, {1, 3, 2, 2});
    const auto protos = ad::reshape(ad::expand(one, 0, 2), {2, 3, 2, 2});
    const auto pooled = spatial_pool(protos, PoolMode::avg);
    const auto inter = inter_scores(protos, pooled);
    const auto intra = intra_score(protos, pooled);
    EXPECT_EQ(inter.values(), intra.values());
}

TEST(InterScore, SingleClass) {
    const auto protos = Tensor({1, 1, 1, 1}, {2});
    EXPECT_EQ(error_code_of([&] { inter_scores(protos, spatial_pool(protos, PoolMode::avg)); }),
              ErrorCode::single_class);
}

TEST(ScoreOracle, MatchesBruteForce) {
    std::mt19937_64 gen(7);
    std::uniform_int_distribution<std::size_t> n_dist(2, 5), c_dist(1, 8), s_dist(1, 4);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = n_dist(gen), c = c_dist(gen), h = s_dist(gen), w = s_dist(gen);
        const auto protos = random_tensor(gen, {n, c, h, w}, -3, 3);
        const Maps m{n, c, h, w, {protos.data().begin(), protos.data().end()}};
        const auto mode = t % 2 ? PoolMode::max : PoolMode::avg;
        const auto pooled = spatial_pool(protos, mode);
        const auto intra = intra_score(protos, pooled);
        const auto inter = inter_scores(protos, pooled);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
                ASSERT_NEAR(intra[i * c + ch], brute_intra(m, i, ch, mode), 1e-10);
                ASSERT_NEAR(inter[i * c + ch], brute_inter(m, i, ch, mode), 1e-10);
            }
    }
}

TEST(InterScore, RemovingAClassNeverDecreases) {
    std::mt19937_64 gen(8);
    for (int t = 0; t < 50; ++t) {
        const std::size_t n = 4, c = 3;
        const auto protos = random_tensor(gen, {n, c, 2, 2});
        const auto full = inter_scores(protos, spatial_pool(protos, PoolMode::avg));
        const std::size_t drop = static_cast<std::size_t>(t) % n;
        std::vector<std::size_t> kept;
        for (std::size_t i = 0; i < n; ++i)
            if (i != drop) kept.push_back(i);
        const auto sub = ad::index_select(protos, 0, kept);
        const auto reduced = inter_scores(sub, spatial_pool(sub, PoolMode::avg));
        for (std::size_t r = 0; r < kept.size(); ++r)
            for (std::size_t ch = 0; ch < c; ++ch) EXPECT_GE(reduced[r * c + ch], full[kept[r] * c + ch]);
    }
}

TEST(FcBlock, ZeroSecondLayerGivesOnes) {
    Rng rng(1);
    const auto p = init_fc_block(32, rng);
    std::mt19937_64 gen(9);
    for (auto mode : {Mode::eval, Mode::train}) {
        const auto out = fc_block_forward(p, random_tensor(gen, {5, 32}, 0, 3), mode);
        EXPECT_EQ(out.shape(), (ad::Shape{5, 32}));
        EXPECT_EQ(out.values(), Eigen::VectorXd::Ones(160));
    }
}

TEST(FcBlock, InitRanges) {
    Rng rng(2);
    const auto p = init_fc_block(16, rng);
    EXPECT_EQ(p.w1.shape(), (ad::Shape{16, 32}));
    EXPECT_LE(p.w1.values().cwiseAbs().maxCoeff(), 0.25);
    EXPECT_EQ(p.w2.shape(), (ad::Shape{32, 16}));
    EXPECT_EQ(p.b2.values().cwiseAbs().maxCoeff(), 0.0);
}

TEST(FcBlock, OutputsInOpenInterval) {
    std::mt19937_64 gen(10);
    for (int t = 0; t < 100; ++t) {
        const auto p = random_block(8, gen, 1.0);
        const auto out = fc_block_forward(p, random_tensor(gen, {5, 8}, 0, 4), t % 2 ? Mode::train : Mode::eval);
        EXPECT_GT(out.values().minCoeff(), 0.0);
        EXPECT_LT(out.values().maxCoeff(), 2.0);
    }
}

TEST(FcBlock, ShapeMismatch) {
    Rng rng(3);
    const auto p = init_fc_block(4, rng);
    EXPECT_EQ(error_code_of([&] { fc_block_forward(p, Tensor::zeros({2, 5}), Mode::eval); }),
              ErrorCode::shape_mismatch);
}

TEST(SupportWeights, AlphaEndpoints) {
    std::mt19937_64 gen(11);
    TdmParams tdm{random_block(6, gen), random_block(6, gen), random_block(6, gen), {}};
    const auto intra = random_tensor(gen, {5, 6}, 0, 2);
    const auto inter = random_tensor(gen, {5, 6}, 0, 2);
    const auto a = fc_block_forward(tdm.intra, intra, Mode::eval);
    const auto b = fc_block_forward(tdm.inter, inter, Mode::eval);
    tdm.options.alpha = 1.0;
    EXPECT_EQ(support_weights(tdm, intra, inter, Mode::eval).values(), a.values());
    tdm.options.alpha = 0.0;
    EXPECT_EQ(support_weights(tdm, intra, inter, Mode::eval).values(), b.values());
}

TEST(SupportWeights, OnesBlendToOnes) {
    const auto tdm = init_tdm(8, {}, 4);
    std::mt19937_64 gen(12);
    const auto w = support_weights(tdm, random_tensor(gen, {5, 8}, 0, 2), random_tensor(gen, {5, 8}, 0, 2), Mode::eval);
    EXPECT_EQ(w.values(), Eigen::VectorXd::Ones(40));
}

TEST(QueryWeights, IdentityAtInitAndPure) {
    const auto tdm = init_tdm(8, {}, 5);
    std::mt19937_64 gen(13);
    const auto q = random_tensor(gen, {7, 8, 2, 2});
    EXPECT_EQ(query_weights(tdm, q, Mode::eval).values(), Eigen::VectorXd::Ones(56));

    TdmParams trained{random_block(8, gen), random_block(8, gen), random_block(8, gen), {}};
    const auto one = random_tensor(gen, {1, 8, 2, 2});
    const auto twice = ad::reshape(ad::expand(one, 0, 2), {2, 8, 2, 2});
    const auto w = query_weights(trained, twice, Mode::eval);
    EXPECT_EQ(w.values().head(8), w.values().tail(8));
}

TEST(QueryWeights, Bounded) {
    std::mt19937_64 gen(14);
    TdmParams tdm{random_block(8, gen), random_block(8, gen), random_block(8, gen, 2.0), {}};
    const auto w = query_weights(tdm, random_tensor(gen, {100, 8, 2, 2}, 0, 3), Mode::eval);
    EXPECT_GT(w.values().minCoeff(), 0.0);
    EXPECT_LT(w.values().maxCoeff(), 2.0);
}

TEST(TaskWeights, EqualInputsAndBetaEndpoints) {
    std::mt19937_64 gen(15);
    const auto w = random_tensor(gen, {1, 6}, 0.1, 1.9);
    TdmOptions opt;
    for (double beta : {0.0, 0.3, 0.5, 0.9, 1.0}) {
        opt.beta = beta;
        const auto t = task_weights(opt, w, w, Mode::eval);
        for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(t[i], w[i], 1e-15);
    }
    const auto ws = random_tensor(gen, {3, 6}, 0.1, 1.9);
    const auto wq = random_tensor(gen, {2, 6}, 0.1, 1.9);
    opt.beta = 1.0;
    const auto s = task_weights(opt, ws, wq, Mode::eval);
    EXPECT_EQ(s.shape(), (ad::Shape{2, 3, 6}));
    for (std::size_t q = 0; q < 2; ++q)
        for (std::size_t e = 0; e < 18; ++e) EXPECT_EQ(s[q * 18 + e], ws[e]);
    opt.beta = 0.0;
    const auto r = task_weights(opt, ws, wq, Mode::eval);
    for (std::size_t q = 0; q < 2; ++q)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(r[(q * 3 + i) * 6 + c], wq[q * 6 + c]);
}

TEST(TaskWeights, TrainingNoiseStatistics) {
    TdmOptions opt;
    const auto ones = Tensor::ones({100, 10});
    const auto one_query = Tensor::ones({10, 10});
    Rng rng(16);
    const auto t = task_weights(opt, ones, one_query, Mode::train, &rng);  // 10×100×10 = 10,000 elements
    ASSERT_EQ(t.size(), 10000u);
    const Eigen::ArrayXd noise = t.values().array() - 1.0;
    EXPECT_GE(noise.minCoeff(), -0.2);
    EXPECT_LE(noise.maxCoeff(), 0.2);
    EXPECT_NEAR(noise.mean(), 0.0, 0.01);
    EXPECT_EQ(error_code_of([&] { task_weights(opt, ones, one_query, Mode::train); }), ErrorCode::invalid_config);
    EXPECT_EQ(task_weights(opt, ones, one_query, Mode::eval).values(), Eigen::VectorXd::Ones(10000));
}

TEST(ApplyWeights, HandExamples) {
    const auto m = map({1, 4}, 2);
    EXPECT_EQ(apply_weights(Tensor::ones({2}), m).values(), m.values());
    const auto out = apply_weights(Tensor({2}, {2, 0.5}), m);
    EXPECT_EQ(out[0], 2.0);
    EXPECT_EQ(out[1], 2.0);
    EXPECT_EQ(apply_weights(Tensor::zeros({2}), m).values().cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(error_code_of([&] { apply_weights(Tensor::ones({3}), m); }), ErrorCode::shape_mismatch);
}

TEST(ApplyWeights, CommutesWithPrototype) {
    std::mt19937_64 gen(17);
    for (int t = 0; t < 100; ++t) {
        const std::size_t k = 1 + static_cast<std::size_t>(t % 5);
        std::vector<Tensor> maps, weighted;
        const auto w = random_tensor(gen, {4}, 0, 2);
        for (std::size_t i = 0; i < k; ++i) {
            maps.push_back(random_tensor(gen, {4, 3, 3}));
            weighted.push_back(apply_weights(w, maps.back()));
        }
        const auto lhs = apply_weights(w, prototype(maps));
        const auto rhs = prototype(weighted);
        for (std::size_t e = 0; e < lhs.size(); ++e) ASSERT_NEAR(lhs[e], rhs[e], 1e-10);
    }
}

TEST(TdmForward, IdentityAtInit) {
    const auto tdm = init_tdm(8, {}, 6);
    std::mt19937_64 gen(18);
    const auto out = tdm_forward(tdm, random_tensor(gen, {5, 8, 2, 2}), random_tensor(gen, {10, 8, 2, 2}), Mode::eval);
    EXPECT_EQ(out.w_task.shape(), (ad::Shape{10, 5, 8}));
    EXPECT_EQ(out.w_task.values(), Eigen::VectorXd::Ones(400));
}

TEST(TdmForward, DisabledModulesGiveOnes) {
    std::mt19937_64 gen(19);
    TdmParams tdm{random_block(8, gen), random_block(8, gen), random_block(8, gen), {}};
    const auto protos = random_tensor(gen, {3, 8, 2, 2});
    const auto queries = random_tensor(gen, {4, 8, 2, 2});
    tdm.options.sam = false;
    auto out = tdm_forward(tdm, protos, queries, Mode::eval);
    EXPECT_EQ(out.w_support.values(), Eigen::VectorXd::Ones(24));
    EXPECT_NE(out.w_query.values(), Eigen::VectorXd::Ones(32));
    tdm.options.sam = true;
    tdm.options.qam = false;
    out = tdm_forward(tdm, protos, queries, Mode::eval);
    EXPECT_EQ(out.w_query.values(), Eigen::VectorXd::Ones(32));
    tdm.options.sam = false;
    Rng rng(1);
    out = tdm_forward(tdm, protos, queries, Mode::train, &rng);
    EXPECT_EQ(out.w_task.values(), Eigen::VectorXd::Ones(96)) << "no noise when both modules are off";
}

TEST(TdmForward, TrainUpdatesOnlyTarget) {
    std::mt19937_64 gen(20);
    auto tdm = init_tdm(4, {}, 7);
    const auto protos = random_tensor(gen, {3, 4, 2, 2});
    const auto queries = random_tensor(gen, {6, 4, 2, 2});
    Rng rng(2);
    tdm_forward(tdm, protos, queries, Mode::train, &rng);
    EXPECT_EQ(tdm.query.running.mean, Eigen::VectorXd::Zero(8));
    tdm_forward(tdm, protos, queries, Mode::train, &rng, &tdm);
    EXPECT_NE(tdm.query.running.mean, Eigen::VectorXd::Zero(8));
    EXPECT_NE(tdm.intra.running.mean, Eigen::VectorXd::Zero(8));
}

TEST(ChannelVariance, IdenticalInstances) {
    const auto m = map({1, 2, 3}, 3);
    const auto r = channel_variance_diagnostic({{m, m, m}}, 0.5);
    EXPECT_EQ(r.variance[0], (std::vector<double>{0, 0, 0}));
    EXPECT_EQ(r.keep[0], (std::vector<bool>{true, true, true}));
}

TEST(ChannelVariance, DifferingChannelMaskedFirst) {
    const auto a = map({1, 2, 3, 4}, 4);
    const auto b = map({1, 5, 3, 4}, 4);
    const auto r = channel_variance_diagnostic({{a, b}}, 0.25);
    EXPECT_EQ(r.variance[0][1], 2.25);  // ((2-3.5)^2 + (5-3.5)^2) / 2
    for (std::size_t c : {0u, 2u, 3u}) EXPECT_EQ(r.variance[0][c], 0.0);
    EXPECT_EQ(r.keep[0], (std::vector<bool>{true, false, true, true}));
    const auto none = channel_variance_diagnostic({{a, b}}, 0.0);
    EXPECT_EQ(none.keep[0], (std::vector<bool>{true, true, true, true}));
}

TEST(ChannelVariance, Errors) {
    const auto a = map({1}, 1);
    EXPECT_EQ(error_code_of([&] { channel_variance_diagnostic({{a}}, 0.1); }), ErrorCode::insufficient_instances);
    EXPECT_EQ(error_code_of([&] { channel_variance_diagnostic({{a, a}}, 1.0); }), ErrorCode::invalid_spec);
}

TEST(TdmGradients, MatchFiniteDifferences) {
    std::mt19937_64 gen(21);
    TdmParams tdm{random_block(3, gen), random_block(3, gen), random_block(3, gen), {}};
    const auto protos = random_tensor(gen, {3, 3, 2, 2}, -2, 2, true);
    const auto queries = random_tensor(gen, {4, 3, 2, 2}, -2, 2, true);
    const auto probe = random_tensor(gen, {4, 3, 3}, 0.5, 1.5);
    auto loss = [&] {
        Rng rng(5);
        return ad::sum(ad::mul(tdm_forward(tdm, protos, queries, Mode::train, &rng).w_task, probe));
    };
    auto params = tdm.parameters();
    params.push_back(protos);
    params.push_back(queries);
    ad::backward(loss());
    const auto numeric = ad::finite_diff_grad([&] { return loss().item(); }, params, 1e-6);
    for (std::size_t i = 0; i < params.size(); ++i)
        for (Eigen::Index j = 0; j < numeric[i].size(); ++j)
            EXPECT_TRUE(test::gradient_close(params[i].grad()[j], numeric[i][j]))
                << "param " << i << " elem " << j << ": " << params[i].grad()[j] << " vs " << numeric[i][j];
}
