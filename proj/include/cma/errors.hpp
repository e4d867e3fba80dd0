#pragma once

#include <stdexcept>
#include <string>

namespace cma {

// Base for every failure raised by the engine. The CLI maps subclasses onto
// exit codes: UsageError -> 1, DegenerateProbability under --strict -> 3,
// everything else -> 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class UnknownToken : public Error {
 public:
  explicit UnknownToken(const std::string& word)
      : Error("unknown token: '" + word + "'"), word_(word) {}
  const std::string& word() const noexcept { return word_; }

 private:
  std::string word_;
};

class BadMagic : public Error {
 public:
  using Error::Error;
};

class UnsupportedVersion : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  ShapeMismatch(const std::string& name, const std::string& expected, const std::string& found)
      : Error("shape mismatch for '" + name + "': expected " + expected + ", found " + found),
        name_(name) {}
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

class TruncatedFile : public Error {
 public:
  using Error::Error;
};

class InterventionError : public Error {
 public:
  using Error::Error;
};

class DegenerateProbability : public Error {
 public:
  using Error::Error;
};

}  // namespace cma
