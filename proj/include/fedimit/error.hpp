#pragma once

#include <stdexcept>
#include <string>

namespace fedimit {

/// Base of every exception thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SpecError : public Error { using Error::Error; };
class DimensionError : public Error { using Error::Error; };
class DecodeError : public Error { using Error::Error; };
class VersionMismatch : public DecodeError { using DecodeError::DecodeError; };
class RangeError : public Error { using Error::Error; };
class NotReady : public Error { using Error::Error; };
class ProtocolError : public Error { using Error::Error; };
class ConnectionError : public Error { using Error::Error; };
class TimeoutError : public ConnectionError { using ConnectionError::ConnectionError; };
class ConfigError : public Error { using Error::Error; };
class MissingArtifact : public Error { using Error::Error; };

}  // namespace fedimit
