#pragma once

#include <stdexcept>
#include <string>

namespace specsim {

/// Invalid or inconsistent configuration; carries the offending field path.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& message)
        : std::runtime_error(field.empty() ? message : field + ": " + message),
          field_(std::move(field)) {}

    const std::string& field() const { return field_; }

private:
    std::string field_;
};

/// Illegal coordinator message or worker state transition.
class ProtocolError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Corrupt, truncated, or incompatible drafter checkpoint.
class CheckpointError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Batch size routed outside every configured bucket.
class RoutingError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace specsim
