#include "tdm/config.hpp"

#include <cmath>

#include "binary_io.hpp"

namespace tdm {

namespace {

constexpr std::uint64_t kBackboneStream = 101;
constexpr std::uint64_t kTdmStream = 102;

template <typename E>
E parse_enum(const nlohmann::json& value, const std::string& key, std::initializer_list<std::pair<const char*, E>> names) {
    const auto text = value.get<std::string>();
    for (const auto& [name, e] : names)
        if (text == name) return e;
    raise(ErrorCode::invalid_config, "unknown value '" + text + "' for " + key);
}

}  // namespace

std::string to_string(PoolMode mode) { return mode == PoolMode::avg ? "avg" : "max"; }
std::string to_string(MetricKind kind) { return kind == MetricKind::squared_euclidean ? "squared_euclidean" : "cosine"; }
std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adam ? "adam" : "sgd"; }

void RunConfig::validate() const {
    try {
        episode.validate();
    } catch (const Error& e) {
        raise(ErrorCode::invalid_config, e.what());
    }
    require(train_episodes >= 1 && eval_episodes >= 1, ErrorCode::invalid_config, "episode counts must be >= 1");
    require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorCode::invalid_config,
            "learning rate must be positive");
    tdm_options().validate();
    metric_options().validate();
    try {
        validate_plan(channel_plan);
        if (dataset_path.empty()) dataset.validate();
    } catch (const Error& e) {
        raise(ErrorCode::invalid_config, e.what());
    }
    if (dataset_path.empty())
        require(dataset.image.channels == channel_plan.front() && dataset.image.height % 16 == 0 &&
                    dataset.image.width % 16 == 0,
                ErrorCode::invalid_config,
                "dataset images must have the plan's input channels and sides divisible by 16");
    require(checkpoint_selection == "final", ErrorCode::invalid_config,
            "checkpoint_selection '" + checkpoint_selection + "' is not supported (only \"final\")");
}

TdmOptions RunConfig::tdm_options() const { return {alpha, beta, noise_amplitude, pooling, sam, qam}; }

nlohmann::json to_json(const RunConfig& c) {
    return {{"n_way", c.episode.n_way},
            {"k_shot", c.episode.k_shot},
            {"n_query", c.episode.n_query},
            {"train_episodes", c.train_episodes},
            {"eval_episodes", c.eval_episodes},
            {"learning_rate", c.learning_rate},
            {"optimizer", to_string(c.optimizer)},
            {"seed", c.seed},
            {"alpha", c.alpha},
            {"beta", c.beta},
            {"noise_amplitude", c.noise_amplitude},
            {"pooling", to_string(c.pooling)},
            {"metric", to_string(c.metric)},
            {"temperature", c.temperature},
            {"channel_plan", c.channel_plan},
            {"sam", c.sam},
            {"qam", c.qam},
            {"dataset", data::to_json(c.dataset)},
            {"dataset_path", c.dataset_path},
            {"checkpoint_selection", c.checkpoint_selection}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    require(j.is_object(), ErrorCode::invalid_config, "config must be a JSON object");
    RunConfig c;
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "n_way") c.episode.n_way = v.get<std::size_t>();
            else if (key == "k_shot") c.episode.k_shot = v.get<std::size_t>();
            else if (key == "n_query") c.episode.n_query = v.get<std::size_t>();
            else if (key == "train_episodes") c.train_episodes = v.get<std::size_t>();
            else if (key == "eval_episodes") c.eval_episodes = v.get<std::size_t>();
            else if (key == "learning_rate") c.learning_rate = v.get<double>();
            else if (key == "optimizer")
                c.optimizer = parse_enum<OptimizerKind>(v, key, {{"adam", OptimizerKind::adam}, {"sgd", OptimizerKind::sgd}});
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "alpha") c.alpha = v.get<double>();
            else if (key == "beta") c.beta = v.get<double>();
            else if (key == "noise_amplitude") c.noise_amplitude = v.get<double>();
            else if (key == "pooling")
                c.pooling = parse_enum<PoolMode>(v, key, {{"avg", PoolMode::avg}, {"max", PoolMode::max}});
            else if (key == "metric")
                c.metric = parse_enum<MetricKind>(
                    v, key, {{"squared_euclidean", MetricKind::squared_euclidean}, {"cosine", MetricKind::cosine}});
            else if (key == "temperature") c.temperature = v.get<double>();
            else if (key == "channel_plan") c.channel_plan = v.get<ChannelPlan>();
            else if (key == "sam") c.sam = v.get<bool>();
            else if (key == "qam") c.qam = v.get<bool>();
            else if (key == "dataset") c.dataset = data::synthetic_spec_from_json(v);
            else if (key == "dataset_path") c.dataset_path = v.get<std::string>();
            else if (key == "checkpoint_selection") c.checkpoint_selection = v.get<std::string>();
            else raise(ErrorCode::invalid_config, "unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            raise(ErrorCode::invalid_config, "config key '" + key + "': " + e.what());
        }
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::invalid_config, path + ": " + e.what());
    }
    return run_config_from_json(j);
}

data::DatasetSplit load_dataset(const RunConfig& config) {
    return config.dataset_path.empty() ? data::generate_dataset(config.dataset) : data::import_dataset(config.dataset_path);
}

Model init_model(const RunConfig& config) {
    config.validate();
    auto backbone = init_backbone(config.channel_plan, derive_seed(config.seed, kBackboneStream));
    auto attention = init_tdm(backbone.out_channels(), config.tdm_options(), derive_seed(config.seed, kTdmStream));
    return {std::move(backbone), std::move(attention), config.metric_options()};
}

}  // namespace tdm
