// Copyright (c) 2026 UltraBM Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ultrabm {

using Scalar = double;

// Error taxonomy. The CLI maps these onto process exit codes:
// usage -> 1, validation/shape/parse/config/io -> 2, runtime/numeric -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ValidationError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct ParseError : Error {
    using Error::Error;
};

struct TrainingError : Error {
    using Error::Error;
};

}  // namespace ultrabm
