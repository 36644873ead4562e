#pragma once

#include <stdexcept>
#include <string>

namespace convscm {

// Caller broke an operation's precondition (shape, ordering, range).
class ContractError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Malformed file or record on disk.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values or a diverging optimization.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// External backend (HTTP endpoint, scripted replay) failed.
class BackendError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ContractError(what);
}

}  // namespace convscm
