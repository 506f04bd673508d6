#pragma once

#include <stdexcept>
#include <string>

namespace causalscope {

// All library failures derive from Error so callers (the CLI in particular)
// can report them uniformly.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class LoadError : public Error {
public:
    using Error::Error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

class PatchError : public Error {
public:
    using Error::Error;
};

class AnnotationError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class RenderError : public Error {
public:
    using Error::Error;
};

} // namespace causalscope
