#pragma once

#include <stdexcept>
#include <string>

namespace mgc {

// Maps onto the CLI exit codes: validation 2, numerical 3, I/O 4.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mgc
