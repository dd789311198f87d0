#pragma once

#include <stdexcept>
#include <string>

namespace dgan {

// Families map 1:1 onto CLI exit codes.
enum class ErrorFamily { usage = 2, config = 3, data = 4, numeric = 5 };

class Error : public std::runtime_error {
public:
    Error(ErrorFamily family, const std::string& what)
        : std::runtime_error(what), family_(family) {}

    ErrorFamily family() const noexcept { return family_; }

private:
    ErrorFamily family_;
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ErrorFamily::usage, what) {}
};

class ConfigError : public Error {
public:
    ConfigError(std::string key, const std::string& what)
        : Error(ErrorFamily::config, key.empty() ? what : key + ": " + what), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorFamily::data, what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorFamily::numeric, what) {}
};

} // namespace dgan
