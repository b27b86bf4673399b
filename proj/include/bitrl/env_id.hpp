#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

#include "bitrl/error.hpp"

namespace bitrl {

enum class EnvId { cartpole, mountaincar, acrobot, textgrid };

inline constexpr std::array<EnvId, 4> kAllEnvs = {EnvId::cartpole, EnvId::mountaincar, EnvId::acrobot,
                                                   EnvId::textgrid};

inline std::string_view env_name(EnvId id) {
  switch (id) {
    case EnvId::cartpole: return "cartpole";
    case EnvId::mountaincar: return "mountaincar";
    case EnvId::acrobot: return "acrobot";
    case EnvId::textgrid: return "textgrid";
  }
  return "unknown";
}

inline EnvId parse_env_id(std::string_view name) {
  for (EnvId id : kAllEnvs) {
    if (env_name(id) == name) return id;
  }
  throw Error(ErrorKind::invalid_argument, "unknown environment '" + std::string(name) + "'");
}

inline std::size_t action_count(EnvId id) {
  switch (id) {
    case EnvId::cartpole: return 2;
    case EnvId::mountaincar: return 3;
    case EnvId::acrobot: return 3;
    case EnvId::textgrid: return 4;
  }
  return 0;
}

inline std::size_t obs_dim(EnvId id) {
  switch (id) {
    case EnvId::cartpole: return 4;
    case EnvId::mountaincar: return 2;
    case EnvId::acrobot: return 6;
    case EnvId::textgrid: return 4;
  }
  return 0;
}

// Worst and best attainable episode returns; used to normalize performance
// when deciding whether a run failed.
struct ReturnRange {
  double worst;
  double best;
};

inline ReturnRange return_range(EnvId id) {
  switch (id) {
    case EnvId::cartpole: return {0.0, 500.0};
    case EnvId::mountaincar: return {-200.0, -1.0};
    case EnvId::acrobot: return {-500.0, -1.0};
    case EnvId::textgrid: return {-1.0, 1.0};
  }
  return {0.0, 1.0};
}

}  // namespace bitrl
