#pragma once

#include <stdexcept>
#include <string>

namespace illusign {

enum class ErrorKind {
    Configuration,
    Contract,
    Io,
    Adapter,
    Inversion,
    Hook,
    OverlapSkip,
    Stage,
};

const char* to_string(ErrorKind kind);

/// Base of every error raised by the library. The kind decides the CLI exit code.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message);

    ErrorKind kind() const noexcept { return m_kind; }

private:
    ErrorKind m_kind;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& message) : Error(ErrorKind::Configuration, message) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& message) : Error(ErrorKind::Contract, message) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error(ErrorKind::Io, message) {}
};

class AdapterError : public Error {
public:
    explicit AdapterError(const std::string& message) : Error(ErrorKind::Adapter, message) {}
};

class InversionError : public Error {
public:
    InversionError(int step, const std::string& message);

    int step() const noexcept { return m_step; }

private:
    int m_step;
};

class HookError : public Error {
public:
    HookError(std::string layer_id, int timestep, const std::string& message);

    const std::string& layer_id() const noexcept { return m_layer_id; }
    int timestep() const noexcept { return m_timestep; }

private:
    std::string m_layer_id;
    int m_timestep;
};

/// Raised by the overlay stage when the start and end hand masks intersect.
class OverlapSkip : public Error {
public:
    explicit OverlapSkip(const std::string& message) : Error(ErrorKind::OverlapSkip, message) {}
};

class StageError : public Error {
public:
    StageError(std::string stage, const std::string& message);

    const std::string& stage() const noexcept { return m_stage; }

private:
    std::string m_stage;
};

// 0 success, 2 validation, 3 external adapter failure, 4 stage failure.
int exit_code_for(ErrorKind kind);

} // namespace illusign
