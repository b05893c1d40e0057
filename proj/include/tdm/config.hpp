#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "tdm/backbone.hpp"
#include "tdm/data.hpp"
#include "tdm/metric.hpp"
#include "tdm/model.hpp"
#include "tdm/tdm.hpp"

namespace tdm {

enum class OptimizerKind { adam, sgd };

/// Everything that determines a run. JSON keys match the field names;
/// unknown keys are rejected and missing keys keep these defaults.
struct RunConfig {
    data::EpisodeSpec episode{5, 1, 16};
    std::size_t train_episodes = 5000;
    std::size_t eval_episodes = 2000;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    std::uint64_t seed = 0;
    double alpha = 0.5;
    double beta = 0.5;
    double noise_amplitude = 0.2;
    PoolMode pooling = PoolMode::avg;
    MetricKind metric = MetricKind::squared_euclidean;
    double temperature = 1.0;
    ChannelPlan channel_plan = kDefaultPlan;
    bool sam = true;
    bool qam = true;
    data::SyntheticSpec dataset;
    std::string dataset_path;  // exported dataset directory; empty means generate from `dataset`
    std::string checkpoint_selection = "final";

    /// Throws InvalidConfig.
    void validate() const;
    TdmOptions tdm_options() const;
    Metric metric_options() const { return {metric, temperature}; }
    bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

std::string to_string(PoolMode mode);
std::string to_string(MetricKind kind);
std::string to_string(OptimizerKind kind);

/// Generates `config.dataset` or imports `config.dataset_path`.
data::DatasetSplit load_dataset(const RunConfig& config);

/// Fresh model for `config`; backbone and attention modules use independent
/// streams derived from the seed.
Model init_model(const RunConfig& config);

}  // namespace tdm
