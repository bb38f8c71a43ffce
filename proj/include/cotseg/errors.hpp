#pragma once

#include <stdexcept>
#include <string>

namespace cotseg {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Out-of-range argument (factor < 1, k > #cases, empty keep-set, ...).
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Input data violates a documented vocabulary or encoding.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// API misuse, e.g. backward() on a non-scalar.
class ContractError : public Error {
public:
    using Error::Error;
};

/// NIfTI parse failure. field() names the offending header field
/// ("magic", "datatype", "sizeof_hdr", "dim", "vox_offset", "truncated", ...).
class NiftiError : public Error {
public:
    NiftiError(std::string field, const std::string& what)
        : Error("nifti " + field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Run configuration rejected. key() names the offending key.
class ConfigError : public Error {
public:
    ConfigError(std::string key, const std::string& what)
        : Error("config " + key + ": " + what), key_(std::move(key)) {}
    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

}  // namespace cotseg
