#pragma once

#include <stdexcept>
#include <string>

namespace sldiff {

// Error categories map one-to-one onto CLI exit codes.
enum class error_kind {
    invalid_argument,
    invalid_cascade,
    degenerate_cascade,
    data,
    schema,
    numeric,
};

class error : public std::runtime_error {
public:
    error(error_kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    error_kind kind() const noexcept { return kind_; }

private:
    error_kind kind_;
};

inline void require(bool cond, error_kind kind, const std::string& what) {
    if (!cond) {
        throw error(kind, what);
    }
}

} // namespace sldiff
