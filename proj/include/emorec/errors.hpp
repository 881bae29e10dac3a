#pragma once

#include <stdexcept>
#include <string>

namespace emorec {

// Error taxonomy shared by every module. Each maps to one failure class
// surfaced at the API boundary; the CLI turns them into exit codes.

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct BoundsError : std::runtime_error {
  explicit BoundsError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ParamError : std::runtime_error {
  explicit ParamError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ImportError : std::runtime_error {
  explicit ImportError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct LabelError : std::runtime_error {
  explicit LabelError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace emorec
