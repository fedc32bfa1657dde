#ifndef SELFREG_ERRORS_HPP
#define SELFREG_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace selfreg {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct ValueError : Error {
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

struct LabelRangeError : Error {
    explicit LabelRangeError(const std::string& msg) : Error(msg) {}
};

struct AlignmentError : Error {
    explicit AlignmentError(const std::string& msg) : Error(msg) {}
};

struct ChannelParityError : Error {
    explicit ChannelParityError(const std::string& msg) : Error(msg) {}
};

struct MissingMaskError : Error {
    explicit MissingMaskError(const std::string& msg) : Error(msg) {}
};

struct DecodeError : Error {
    explicit DecodeError(const std::string& msg) : Error(msg) {}
};

struct DivergenceError : Error {
    explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

struct IOError : Error {
    explicit IOError(const std::string& msg) : Error(msg) {}
};

}  // namespace selfreg

#endif
