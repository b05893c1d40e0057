#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdm/checkpoint.hpp"
#include "tdm/config.hpp"
#include "tdm/data.hpp"

namespace tdm {

/// Raises the glibc mmap/trim thresholds so the per-step feature buffers are
/// recycled instead of being returned to the kernel. No-op elsewhere.
void tune_allocator();

/// Adam (0.9, 0.999, 1e-8) with bias correction, or plain SGD. Parameters
/// without a gradient are treated as having a zero gradient.
void optimizer_step(const RunConfig& config, Model& model, OptimizerState& state);

/// Random streams of training step `step`: episode sampling and weight noise.
struct StepStreams {
    Rng sampler;
    Rng noise;
};
StepStreams step_streams(std::uint64_t seed, std::size_t step);

/// Called after every optimizer step with (step, loss).
using StepCallback = std::function<void(std::size_t, double)>;

/// Continues training for `steps` episodes. Episode sampling and weight noise
/// use per-step streams, so resuming from a saved step reproduces a single
/// uninterrupted run. Throws NonFiniteLoss with diagnostics.
void train_steps(Checkpoint& checkpoint, const data::DatasetSplit& split, std::size_t steps,
                 std::vector<double>* loss_history = nullptr, const StepCallback& on_step = {});

/// init_checkpoint(config) trained for config.train_episodes steps.
Checkpoint train(const RunConfig& config, const data::DatasetSplit& split, std::vector<double>* loss_history = nullptr,
                 const StepCallback& on_step = {});

/// Mean eval-mode episode loss over `episodes` fixed episodes of `part`.
double heldout_loss(const Model& model, const data::DatasetSplit& split, data::Partition part,
                    const data::EpisodeSpec& spec, std::size_t episodes, std::uint64_t seed);

struct ConfidenceInterval {
    double mean = 0.0;
    double half_width = 0.0;
};

/// Normal-approximation 95% interval, 1.96·s/√n with the n−1 standard
/// deviation. Throws InsufficientSamples for n < 2.
ConfidenceInterval compute_ci(std::span<const double> samples);

struct EvalReport {
    double mean = 0.0;        // percent
    double half_width = 0.0;  // percent
    std::size_t n = 0;
    std::vector<double> episode_accuracy;  // fractions in [0, 1], episode order
};

struct EvalOptions {
    std::size_t workers = 1;
    /// Scores each query against a uniformly random label instead of its own.
    bool randomize_labels = false;
};

/// Episode e is sampled from the novel split with Rng(seed + e). The model is
/// only read, so workers share it.
EvalReport evaluate(const Model& model, const data::DatasetSplit& split, const data::EpisodeSpec& spec,
                    std::size_t episodes, std::uint64_t seed, const EvalOptions& options = {});
EvalReport evaluate(const Checkpoint& checkpoint, const data::DatasetSplit& split, std::size_t episodes,
                    std::uint64_t seed, const EvalOptions& options = {});

nlohmann::json eval_json(const EvalReport& report, std::uint64_t seed, const RunConfig& config);

struct AblationCell {
    bool sam = true;
    bool qam = true;
    PoolMode pooling = PoolMode::avg;
    MetricKind metric = MetricKind::squared_euclidean;
    EvalReport report;
};

struct AblationOptions {
    std::vector<PoolMode> poolings;   // empty: config.pooling only
    std::vector<MetricKind> metrics;  // empty: config.metric only
    std::size_t workers = 1;
    std::function<void(const AblationCell&)> on_cell;
};

/// SAM × QAM grid for every (pooling, metric) pair. Every cell trains from
/// config.seed and evaluates with the same seed.
std::vector<AblationCell> ablate(const RunConfig& config, const data::DatasetSplit& split,
                                 const AblationOptions& options = {});

/// sam,qam,pooling,metric,mean,half_width,n
std::string ablation_csv(std::span<const AblationCell> cells);

/// Writes channel_weights.csv, aggregated_maps.csv and channel_variance.csv
/// under `directory` for one episode, using eval-mode weights.
void export_channel_weights(const Model& model, const data::DatasetSplit& split, const data::Episode& episode,
                            const std::string& directory, double drop_fraction = 0.25);

/// One parameter tensor. The worst offender is the element with the largest
/// relative error, or the largest absolute error if no element is large
/// enough to be judged relatively.
struct GradCheckGroup {
    std::string name;
    std::size_t elements = 0;
    std::size_t failures = 0;
    std::size_t reprobed = 0;  // elements whose nominal estimate was not confirmed
    double max_relative_error = 0.0;  // over elements with |numeric| >= 1e-3
    double max_absolute_error = 0.0;  // over the remaining elements
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
    std::size_t checked = 0;
    std::size_t failures = 0;
    std::size_t reprobed = 0;
    double loss = 0.0;
};

struct GradCheckOptions {
    /// Nominal central-difference step. Each estimate must be confirmed by the
    /// estimate at a tenfold smaller step (agreement within tolerance / 10),
    /// with neither probe pair crossing a relu, max or clamp kink; otherwise
    /// the step keeps shrinking down to min_epsilon. An element that never
    /// settles counts as a failure.
    double epsilon = 1e-4;
    double min_epsilon = 1e-8;
    double tolerance = 1e-4;
    /// Absolute bound used instead of the relative one where |numeric| < 1e-3.
    double absolute_tolerance = 1e-6;
    std::uint64_t seed = 0;
};

/// Tiny model (3×16×16 images, plan 3→4→4→8→8, 2-way 1-shot, one query):
/// reverse-mode gradients of the episode loss against central differences
/// for every parameter element. Second FC layers are randomized so the
/// attention path carries gradient. Throws ToleranceExceeded.
GradCheckReport grad_check(const GradCheckOptions& options = {});

std::string format_grad_check(const GradCheckReport& report);

}  // namespace tdm
