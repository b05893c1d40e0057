#include "tdm/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "binary_io.hpp"
#include "tdm/ops.hpp"

namespace tdm {

namespace {

constexpr std::uint64_t kEpisodeStream = 201;
constexpr std::uint64_t kNoiseStream = 202;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEpsilon = 1e-8;
constexpr double kRelativeFloor = 1e-3;

std::string describe_failure(const Checkpoint& ckpt, const data::Episode& episode, double loss) {
    std::ostringstream os;
    os << "loss " << loss << " at step " << ckpt.step << "; episode classes";
    for (auto c : episode.class_map) os << ' ' << c;
    const auto names = parameter_names(ckpt.model);
    const auto params = ckpt.model.parameters();
    os << "; largest |parameter|:";
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double m = params[i].values().cwiseAbs().maxCoeff();
        if (!std::isfinite(m) || m > 1e3) os << ' ' << names[i] << '=' << m;
    }
    return os.str();
}

double episode_accuracy(const Model& model, const data::DatasetSplit& split, const data::EpisodeSpec& spec,
                        std::uint64_t seed, bool randomize_labels) {
    Rng rng(seed);
    const auto episode = data::sample_episode(split, data::Partition::novel, spec, rng);
    const auto features = episode_features(model, split, episode, Mode::eval);
    const auto result = run_head(model, features, spec, {}, Mode::eval);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < episode.query_labels.size(); ++i) {
        const std::size_t truth = randomize_labels ? rng.below(spec.n_way) : episode.query_labels[i];
        correct += result.prediction.labels[i] == truth;
    }
    return static_cast<double>(correct) / static_cast<double>(episode.query_labels.size());
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

ad::Tensor map_of(const ad::Tensor& batch, std::size_t i) {
    const ad::Shape shape(batch.shape().begin() + 1, batch.shape().end());
    const auto n = static_cast<Eigen::Index>(ad::numel(shape));
    return ad::Tensor::from_values(shape, batch.values().segment(static_cast<Eigen::Index>(i) * n, n));
}

}  // namespace

void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

StepStreams step_streams(std::uint64_t seed, std::size_t step) {
    return {Rng(derive_seed(derive_seed(seed, kEpisodeStream), step)),
            Rng(derive_seed(derive_seed(seed, kNoiseStream), step))};
}

void optimizer_step(const RunConfig& config, Model& model, OptimizerState& state) {
    auto params = model.parameters();
    ++state.steps;
    const double lr = config.learning_rate;
    if (state.kind == OptimizerKind::sgd) {
        for (auto& p : params)
            if (p.has_grad()) p.mutable_values() -= lr * p.grad();
        return;
    }
    require(state.m.size() == params.size() && state.v.size() == params.size(), ErrorCode::shape_mismatch,
            "optimizer state does not match the model");
    const double t = static_cast<double>(state.steps);
    const double c1 = 1.0 - std::pow(kAdamBeta1, t);
    const double c2 = 1.0 - std::pow(kAdamBeta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (params[i].has_grad()) {
            const Eigen::VectorXd g = params[i].grad();
            m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
            v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g.cwiseAbs2();
        } else {
            m *= kAdamBeta1;
            v *= kAdamBeta2;
        }
        params[i].mutable_values().array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + kAdamEpsilon);
    }
}

void train_steps(Checkpoint& ckpt, const data::DatasetSplit& split, std::size_t steps,
                 std::vector<double>* loss_history, const StepCallback& on_step) {
    tune_allocator();
    const RunConfig& config = ckpt.config;
    auto params = ckpt.model.parameters();
    for (auto& p : params) p.zero_grad();
    for (std::size_t s = 0; s < steps; ++s) {
        auto [sampler, noise] = step_streams(config.seed, ckpt.step);
        const auto episode = data::sample_episode(split, data::Partition::base, config.episode, sampler);
        const auto features = episode_features(ckpt.model, split, episode, Mode::train, &ckpt.model);
        const auto result =
            run_head(ckpt.model, features, config.episode, episode.query_labels, Mode::train, &noise, &ckpt.model);
        const double loss = result.loss.item();
        if (!std::isfinite(loss)) raise(ErrorCode::non_finite_loss, describe_failure(ckpt, episode, loss));
        ad::backward(result.loss);
        optimizer_step(config, ckpt.model, ckpt.optimizer);
        for (auto& p : params) p.zero_grad();
        ++ckpt.step;
        if (loss_history) loss_history->push_back(loss);
        if (on_step) on_step(ckpt.step, loss);
    }
}

Checkpoint train(const RunConfig& config, const data::DatasetSplit& split, std::vector<double>* loss_history,
                 const StepCallback& on_step) {
    auto ckpt = init_checkpoint(config);
    train_steps(ckpt, split, config.train_episodes, loss_history, on_step);
    return ckpt;
}

double heldout_loss(const Model& model, const data::DatasetSplit& split, data::Partition part,
                    const data::EpisodeSpec& spec, std::size_t episodes, std::uint64_t seed) {
    require(episodes >= 1, ErrorCode::invalid_config, "need at least one episode");
    ad::NoGradGuard guard;
    double total = 0.0;
    for (std::size_t e = 0; e < episodes; ++e) {
        Rng rng(seed + e);
        const auto episode = data::sample_episode(split, part, spec, rng);
        const auto features = episode_features(model, split, episode, Mode::eval);
        total += run_head(model, features, spec, episode.query_labels, Mode::eval).loss.item();
    }
    return total / static_cast<double>(episodes);
}

ConfidenceInterval compute_ci(std::span<const double> samples) {
    require(samples.size() >= 2, ErrorCode::insufficient_samples, "confidence interval needs at least two samples");
    // shifted by the first sample so identical samples give exactly zero spread
    const auto n = static_cast<double>(samples.size());
    const double origin = samples.front();
    double shift = 0.0;
    for (double x : samples) shift += x - origin;
    shift /= n;
    double ss = 0.0;
    for (double x : samples) ss += (x - origin - shift) * (x - origin - shift);
    return {origin + shift, 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

EvalReport evaluate(const Model& model, const data::DatasetSplit& split, const data::EpisodeSpec& spec,
                    std::size_t episodes, std::uint64_t seed, const EvalOptions& options) {
    spec.validate();
    tune_allocator();
    std::vector<double> accuracy(episodes);
    std::vector<std::exception_ptr> errors(episodes);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        ad::NoGradGuard guard;
        for (std::size_t e; (e = next.fetch_add(1)) < episodes;) {
            try {
                accuracy[e] = episode_accuracy(model, split, spec, seed + e, options.randomize_labels);
            } catch (...) {
                errors[e] = std::current_exception();
            }
        }
    };
    const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, std::max<std::size_t>(episodes, 1));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    for (const auto& error : errors)
        if (error) std::rethrow_exception(error);

    const auto ci = compute_ci(accuracy);
    return {100.0 * ci.mean, 100.0 * ci.half_width, episodes, std::move(accuracy)};
}

EvalReport evaluate(const Checkpoint& checkpoint, const data::DatasetSplit& split, std::size_t episodes,
                    std::uint64_t seed, const EvalOptions& options) {
    return evaluate(checkpoint.model, split, checkpoint.config.episode, episodes, seed, options);
}

nlohmann::json eval_json(const EvalReport& report, std::uint64_t seed, const RunConfig& config) {
    return {{"mean", report.mean},
            {"half_width", report.half_width},
            {"n", report.n},
            {"seed", seed},
            {"config", to_json(config)}};
}

std::vector<AblationCell> ablate(const RunConfig& config, const data::DatasetSplit& split,
                                 const AblationOptions& options) {
    config.validate();
    const auto poolings = options.poolings.empty() ? std::vector{config.pooling} : options.poolings;
    const auto metrics = options.metrics.empty() ? std::vector{config.metric} : options.metrics;
    std::vector<AblationCell> cells;
    for (auto pooling : poolings)
        for (auto metric : metrics)
            for (auto [sam, qam] : {std::pair{false, false}, {true, false}, {false, true}, {true, true}}) {
                RunConfig cell = config;
                cell.pooling = pooling;
                cell.metric = metric;
                cell.sam = sam;
                cell.qam = qam;
                const auto ckpt = train(cell, split);
                cells.push_back({sam, qam, pooling, metric,
                                 evaluate(ckpt.model, split, cell.episode, cell.eval_episodes, cell.seed,
                                          {options.workers, false})});
                if (options.on_cell) options.on_cell(cells.back());
            }
    return cells;
}

std::string ablation_csv(std::span<const AblationCell> cells) {
    std::ostringstream os;
    os << "sam,qam,pooling,metric,mean,half_width,n\n";
    for (const auto& c : cells)
        os << (c.sam ? "on" : "off") << ',' << (c.qam ? "on" : "off") << ',' << to_string(c.pooling) << ','
           << to_string(c.metric) << ',' << fmt(c.report.mean) << ',' << fmt(c.report.half_width) << ','
           << c.report.n << '\n';
    return os.str();
}

void export_channel_weights(const Model& model, const data::DatasetSplit& split, const data::Episode& episode,
                            const std::string& directory, double drop_fraction) {
    ad::NoGradGuard guard;
    const auto& spec = episode.spec;
    const auto features = episode_features(model, split, episode, Mode::eval);
    const auto result = run_head(model, features, spec, {}, Mode::eval);
    const auto& w = result.weights;
    const std::size_t n = spec.n_way, c = model.tdm.channels(), u = spec.n_query;
    const std::size_t h = result.prototypes.dim(2), wd = result.prototypes.dim(3);

    // Each class is represented by its first query: w_query of that query and
    // its task weight against the class's own prototype.
    std::ostringstream weights;
    weights << "class_id,channel,w_intra,w_inter,w_support,w_query,w_task\n";
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t q = k * u;
        for (std::size_t ch = 0; ch < c; ++ch)
            weights << episode.class_map[k] << ',' << ch << ',' << fmt(w.w_intra[k * c + ch]) << ','
                    << fmt(w.w_inter[k * c + ch]) << ',' << fmt(w.w_support[k * c + ch]) << ','
                    << fmt(w.w_query[q * c + ch]) << ',' << fmt(w.w_task[(q * n + k) * c + ch]) << '\n';
    }

    std::ostringstream maps;
    maps << "class_id,row,col,raw_sum,task_weighted_sum,gap,gmp\n";
    const std::size_t hw = h * wd;
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t q = k * u;
        for (std::size_t p = 0; p < hw; ++p) {
            double raw = 0.0, weighted = 0.0, peak = -INFINITY;
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double v = result.prototypes[(k * c + ch) * hw + p];
                raw += v;
                weighted += w.w_task[(q * n + k) * c + ch] * v;
                peak = std::max(peak, v);
            }
            maps << episode.class_map[k] << ',' << p / wd << ',' << p % wd << ',' << fmt(raw) << ','
                 << fmt(weighted) << ',' << fmt(raw / static_cast<double>(c)) << ',' << fmt(peak) << '\n';
        }
    }

    std::vector<std::vector<ad::Tensor>> class_maps(n);
    for (std::size_t i = 0; i < episode.support_ids.size(); ++i)
        class_maps[episode.support_labels[i]].push_back(map_of(features.support, i));
    for (std::size_t i = 0; i < episode.query_ids.size(); ++i)
        class_maps[episode.query_labels[i]].push_back(map_of(features.query, i));
    const auto diag = channel_variance_diagnostic(class_maps, drop_fraction);
    std::ostringstream variance;
    variance << "class_id,channel,variance,kept\n";
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t ch = 0; ch < c; ++ch)
            variance << episode.class_map[k] << ',' << ch << ',' << fmt(diag.variance[k][ch]) << ','
                     << (diag.keep[k][ch] ? 1 : 0) << '\n';

    std::filesystem::create_directories(directory);
    const std::filesystem::path dir(directory);
    io::write_file((dir / "channel_weights.csv").string(), weights.str());
    io::write_file((dir / "aggregated_maps.csv").string(), maps.str());
    io::write_file((dir / "channel_variance.csv").string(), variance.str());
}

GradCheckReport grad_check(const GradCheckOptions& options) {
    RunConfig config;
    config.episode = {2, 1, 1};
    config.channel_plan = {3, 4, 4, 8, 8};
    config.seed = options.seed;
    config.dataset.classes = 4;
    config.dataset.image = {3, 16, 16};
    config.dataset.images_per_class = 2;
    config.dataset.super_templates = 2;
    config.dataset.glyph_size = 4;
    config.dataset.jitter = 1;
    config.dataset.seed = options.seed;
    const auto split = load_dataset(config);
    Model model = init_model(config);

    // Zero second layers make every attention weight exactly 1 and starve
    // the first layers of gradient, so draw them at random.
    Rng rng(derive_seed(options.seed, kNoiseStream));
    for (auto* block : {&model.tdm.intra, &model.tdm.inter, &model.tdm.query})
        for (auto* t : {&block->w2, &block->b2})
            for (auto& x : t->mutable_values()) x = rng.uniform(-0.5, 0.5);

    Rng sampler(derive_seed(options.seed, kEpisodeStream));
    const auto episode = data::sample_episode(split, data::Partition::base, config.episode, sampler);
    const std::uint64_t noise_seed = derive_seed(options.seed, kNoiseStream + 1);
    auto loss = [&] {
        Rng noise(noise_seed);
        const auto features = episode_features(model, split, episode, Mode::train);
        return run_head(model, features, config.episode, episode.query_labels, Mode::train, &noise).loss;
    };

    const auto params = model.parameters();
    const auto names = parameter_names(model);
    for (auto p : params) p.zero_grad();
    ad::testing::BranchTrace trace;
    const auto l = loss();
    const std::uint64_t branches = trace.digest();
    ad::backward(l);

    std::vector<std::uint64_t> digests;
    auto probe = [&] {
        trace.reset();
        const double v = loss().item();
        digests.push_back(trace.digest());
        return v;
    };
    // nominal step first; entries are then confirmed element by element
    auto numeric = ad::finite_diff_grad(probe, params, options.epsilon);

    GradCheckReport report;
    report.loss = l.item();
    std::size_t probe_index = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Eigen::VectorXd analytic =
            params[i].has_grad() ? params[i].grad() : Eigen::VectorXd::Zero(numeric[i].size());
        GradCheckGroup g{names[i], static_cast<std::size_t>(analytic.size())};
        bool judged_relatively = false;
        for (Eigen::Index j = 0; j < analytic.size(); ++j, probe_index += 2) {
            // Accept an estimate once the next smaller step confirms it and
            // neither probe pair crossed a kink.
            ad::Tensor handle = params[i];
            auto& x = handle.mutable_values()[j];
            const double original = x;
            auto central = [&](double h) {
                x = original + h;
                const double plus = probe();
                x = original - h;
                const double minus = probe();
                x = original;
                const bool same = digests[digests.size() - 2] == branches && digests.back() == branches;
                return std::pair{(plus - minus) / (2.0 * h), same};
            };
            double estimate = numeric[i][j];
            bool smooth = digests[probe_index] == branches && digests[probe_index + 1] == branches;
            bool settled = false;
            for (double h = options.epsilon / 10; !settled && h >= options.min_epsilon; h /= 10) {
                const auto [finer, finer_smooth] = central(h);
                settled = smooth && finer_smooth &&
                          std::abs(estimate - finer) <=
                              0.1 * options.tolerance * std::max(std::abs(finer), kRelativeFloor);
                if (!settled) {
                    g.reprobed += h == options.epsilon / 10;
                    estimate = finer;
                    smooth = finer_smooth;
                }
            }
            numeric[i][j] = estimate;
            const double a = analytic[j], fd = numeric[i][j], diff = std::abs(a - fd);
            bool worst = false;
            if (std::abs(fd) >= kRelativeFloor) {
                const double rel = diff / std::max(std::abs(a), std::abs(fd));
                g.failures += !settled || rel >= options.tolerance;
                worst = !judged_relatively || rel > g.max_relative_error;
                g.max_relative_error = std::max(g.max_relative_error, rel);
                judged_relatively = true;
            } else {
                g.failures += !settled || diff >= options.absolute_tolerance;
                worst = !judged_relatively && diff >= g.max_absolute_error;
                g.max_absolute_error = std::max(g.max_absolute_error, diff);
            }
            if (worst) {
                g.worst_index = static_cast<std::size_t>(j);
                g.analytic = a;
                g.numeric = fd;
            }
        }
        report.reprobed += g.reprobed;
        report.max_relative_error = std::max(report.max_relative_error, g.max_relative_error);
        report.max_absolute_error = std::max(report.max_absolute_error, g.max_absolute_error);
        report.checked += g.elements;
        report.failures += g.failures;
        report.groups.push_back(g);
    }
    for (auto p : params) p.zero_grad();
    if (report.failures > 0) raise(ErrorCode::tolerance_exceeded, format_grad_check(report));
    return report;
}

std::string format_grad_check(const GradCheckReport& report) {
    std::ostringstream os;
    os << "checked " << report.checked << " gradient elements, loss " << fmt(report.loss) << '\n'
       << "max relative error " << fmt(report.max_relative_error) << ", max absolute error (small gradients) "
       << fmt(report.max_absolute_error) << ", failures " << report.failures << ", re-probed at a smaller step "
       << report.reprobed << '\n';
    for (const auto& g : report.groups) {
        os << "  " << std::left << std::setw(26) << g.name << " n=" << std::setw(4) << g.elements
           << " rel=" << std::setw(12) << fmt(g.max_relative_error) << " abs=" << std::setw(12)
           << fmt(g.max_absolute_error) << " worst[" << g.worst_index << "] " << fmt(g.analytic) << " vs "
           << fmt(g.numeric);
        if (g.reprobed) os << " (" << g.reprobed << " re-probed)";
        os << (g.failures ? "  FAIL" : "") << '\n';
    }
    return os.str();
}

}  // namespace tdm
