#pragma once

#include <stdexcept>
#include <string>

namespace loctrans {

// Every failure surfaced by the library derives from Error so callers (the CLI
// in particular) can map categories onto exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};
struct ParameterError : Error {
    using Error::Error;
};
struct IndexError : Error {
    using Error::Error;
};
struct InputError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct DomainError : Error {
    using Error::Error;
};
struct StructureError : Error {
    using Error::Error;
};
struct DivergenceError : Error {
    using Error::Error;
};

} // namespace loctrans
