#pragma once

#include <stdexcept>
#include <string>

namespace mforge {

/// Invalid parameters, detected before any computation starts.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A time query fell outside the sampled Wiener window. Never extrapolated.
class WindowError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NaN/overflow in a solver, or a fixed-point iteration that stopped contracting.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A state was expected in the range of a spectral projection but is not.
class ProjectionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Defective (non-simple) characteristic root; Jordan chains are not supported.
class MultiplicityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Root counting failed (contour kept passing too close to a root).
class ContourError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Growth estimate inconsistent with the requested dichotomy gap.
class DichotomyError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mforge
