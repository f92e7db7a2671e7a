#pragma once

#include <stdexcept>
#include <string>

namespace nightfuse {

/// Base of every exception thrown by the library. `exit_code()` is what the
/// CLI returns when the exception escapes a subcommand.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 2; }
};

class FormatError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class UnitsError : public Error {
public:
    using Error::Error;
};

class ParameterError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 1; }
};

class EvaluationError : public Error {
public:
    using Error::Error;
};

// Sampler/checkpoint objective mismatch and similar misuse of a SamplerSpec.
class SpecError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 1; }
};

class NumericError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class VerificationError : public NumericError {
public:
    using NumericError::NumericError;
};

class ConfigError : public Error {
public:
    ConfigError(std::string key_path, const std::string& what)
        : Error(key_path.empty() ? what : key_path + ": " + what), key_path_(std::move(key_path)) {}
    const std::string& key_path() const noexcept { return key_path_; }
    int exit_code() const noexcept override { return 1; }

private:
    std::string key_path_;
};

/// A pipeline stage failed; carries the stage name and the original exit code.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what, int code = 2)
        : Error(stage + ": " + what), stage_(std::move(stage)), code_(code) {}
    const std::string& stage() const noexcept { return stage_; }
    int exit_code() const noexcept override { return code_; }

private:
    std::string stage_;
    int code_;
};

} // namespace nightfuse
