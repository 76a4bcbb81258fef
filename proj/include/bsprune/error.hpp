#pragma once

#include <stdexcept>
#include <string>

namespace bsprune {

// Error categories map onto the CLI exit codes: config -> 2, numeric -> 3, io -> 4.
enum class ErrorKind { config, numeric, io };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string msg) : std::runtime_error(std::move(msg)), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

    int exit_code() const {
        switch (kind_) {
        case ErrorKind::config: return 2;
        case ErrorKind::numeric: return 3;
        case ErrorKind::io: return 4;
        }
        return 3;
    }

    static Error config(const std::string& msg) { return Error(ErrorKind::config, msg); }
    static Error numeric(const std::string& msg) { return Error(ErrorKind::numeric, msg); }
    static Error io(const std::string& msg) { return Error(ErrorKind::io, msg); }

private:
    ErrorKind kind_;
};

}  // namespace bsprune
