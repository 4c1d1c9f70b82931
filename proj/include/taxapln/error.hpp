#pragma once

#include <stdexcept>
#include <string>

namespace taxapln {

/// Base of every error raised by the library. The category drives the CLI
/// exit code: config errors exit 2, data errors 3, numeric failures 4.
class Error : public std::runtime_error {
public:
    enum class Category { config, data, numeric };

    Error(Category category, std::string code, const std::string& message)
        : std::runtime_error(code + ": " + message), category_(category), code_(std::move(code)) {}

    Category category() const noexcept { return category_; }
    /// Short machine-readable identifier, e.g. "RaggedLineage".
    const std::string& code() const noexcept { return code_; }

private:
    Category category_;
    std::string code_;
};

class ConfigError : public Error {
public:
    ConfigError(std::string code, const std::string& message)
        : Error(Category::config, std::move(code), message) {}
};

class DataError : public Error {
public:
    DataError(std::string code, const std::string& message)
        : Error(Category::data, std::move(code), message) {}
};

class NumericError : public Error {
public:
    NumericError(std::string code, const std::string& message)
        : Error(Category::numeric, std::move(code), message) {}
};

}  // namespace taxapln
