// Copyright (c) 2026 The kvpack Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace kvpack {

// Base class for everything thrown by this library.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad arguments, bad configuration, unsupported parameter combinations.
// The CLI maps these to exit code 2.
struct parameter_error : error {
    using error::error;
};

// Dimension / geometry mismatches between matrices and caches.
struct shape_error : parameter_error {
    using parameter_error::parameter_error;
};

// Invalid numeric content (NaN/Inf activations, malformed snapshot bytes,
// attention rows that are not distributions). The CLI maps these to exit
// code 3.
struct data_error : error {
    using error::error;
};

// Filesystem failures; message always carries the path.
struct io_error : error {
    using error::error;
};

} // namespace kvpack
