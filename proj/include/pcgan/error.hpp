#pragma once

#include <stdexcept>
#include <string>

namespace pcgan {

//! Bad input, malformed file or inconsistent configuration.
class UsageError : public std::invalid_argument
{
public:
  using std::invalid_argument::invalid_argument;
};

//! A non-finite value showed up in a forward pass, loss or gradient.
class NumericalError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

//! An artifact on disk was produced by a different configuration.
class StaleArtifactError : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void
require(bool condition, const std::string& message)
{
  if (!condition)
    throw UsageError(message);
}

} // namespace detail

} // namespace pcgan
