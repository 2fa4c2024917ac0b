#pragma once

#include <stdexcept>
#include <string>

namespace dq {

// Error taxonomy shared by every module. All derive from std::runtime_error
// so callers that do not care about the category can catch one type.

class InvalidConfig : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Unsupported : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dq
