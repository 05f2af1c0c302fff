#pragma once

#include <cstdint>
#include <string>

#include "prunekit/model.hpp"
#include "prunekit/plan.hpp"

namespace prunekit {

inline constexpr const char* kCheckpointMagic = "PRUNEKIT-CKPT v1";

// Text header (config, gate config, dims with enabled flags, tensor and gate
// inventories) followed by a raw little-endian float32 payload. Round-trips
// are byte-exact; loading validates every shape against the header.
struct LoadedCheckpoint {
  Model<float> model;
  GateSet<float> gates;
  PrunePlan plan;
  GateConfig gate_config;
  bool model_d_enabled{false};
  std::uint64_t step{0};
};

void save_checkpoint(const std::string& path, const Model<float>& model, const GateSet<float>& gates,
                     const PrunePlan& plan, const GateConfig& gate_config, std::uint64_t step);

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace prunekit
