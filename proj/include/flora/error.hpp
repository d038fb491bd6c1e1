#pragma once

#include <stdexcept>
#include <string>

namespace flora {

// Exit-code classes used by the CLI: usage/config -> 1, data -> 2, numeric -> 3.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public NumericError {
 public:
  using NumericError::NumericError;
};

}  // namespace flora
