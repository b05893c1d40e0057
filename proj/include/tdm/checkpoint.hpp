#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "tdm/config.hpp"
#include "tdm/model.hpp"

namespace tdm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Moment estimates, one vector per Model::parameters() entry. Empty for SGD.
struct OptimizerState {
    OptimizerKind kind = OptimizerKind::adam;
    std::size_t steps = 0;
    std::vector<Eigen::VectorXd> m;
    std::vector<Eigen::VectorXd> v;
};

struct Checkpoint {
    RunConfig config;
    Model model;
    OptimizerState optimizer;
    std::size_t step = 0;

    Checkpoint clone() const { return {config, model.clone(), optimizer, step}; }
};

/// Untrained checkpoint: init_model(config) with zeroed optimizer moments.
Checkpoint init_checkpoint(const RunConfig& config);

/// Names of Model::parameters() entries, in the same order.
std::vector<std::string> parameter_names(const Model& model);

/// Layout: "TDMC", u32 LE version, u64 LE manifest length, JSON manifest,
/// then every tensor as little-endian f32 in manifest order.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
/// Throws BadMagic, UnsupportedVersion, ManifestMismatch, TruncatedPayload.
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Rounds every stored value to f32 in place, i.e. what a save/load cycle yields.
void round_to_f32(Checkpoint& checkpoint);

/// True when every parameter, running statistic and moment matches exactly.
bool same_state(const Checkpoint& a, const Checkpoint& b);

}  // namespace tdm
