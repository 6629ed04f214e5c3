#include "illusign/errors.hpp"

#include <fmt/format.h>

namespace illusign {

const char* to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Configuration: return "configuration";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Io: return "io";
    case ErrorKind::Adapter: return "adapter";
    case ErrorKind::Inversion: return "inversion";
    case ErrorKind::Hook: return "hook";
    case ErrorKind::OverlapSkip: return "overlap-skip";
    case ErrorKind::Stage: return "stage";
    }
    return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(message), m_kind(kind) {}

InversionError::InversionError(int step, const std::string& message)
    : Error(ErrorKind::Inversion, fmt::format("inversion failed at step {}: {}", step, message)),
      m_step(step) {}

HookError::HookError(std::string layer_id, int timestep, const std::string& message)
    : Error(ErrorKind::Hook,
            fmt::format("attention hook failed at layer '{}', timestep {}: {}", layer_id, timestep, message)),
      m_layer_id(std::move(layer_id)),
      m_timestep(timestep) {}

StageError::StageError(std::string stage, const std::string& message)
    : Error(ErrorKind::Stage, fmt::format("stage '{}' failed: {}", stage, message)),
      m_stage(std::move(stage)) {}

int exit_code_for(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Configuration:
    case ErrorKind::Contract:
        return 2;
    case ErrorKind::Adapter:
        return 3;
    default:
        return 4;
    }
}

} // namespace illusign
