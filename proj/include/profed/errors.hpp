#pragma once

#include <stdexcept>
#include <string>

namespace profed {

// Shape or size disagreement between operands.
class DimensionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values encountered during training or optimization.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Federated message or partition inconsistency.
class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A backward pass was attempted with a context that no longer matches its parameters.
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
public:
    enum class Kind { MissingFile, Parse, UnknownKey, InvalidValue };

    ConfigError(Kind kind, std::string key, const std::string& message)
        : std::runtime_error(message), kind_(kind), key_(std::move(key)) {}

    Kind kind() const noexcept { return kind_; }
    const std::string& key() const noexcept { return key_; }

private:
    Kind kind_;
    std::string key_;
};

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { Io, BadMagic, Version, Truncated, HashMismatch, Schema };

    CheckpointError(Kind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

} // namespace profed
