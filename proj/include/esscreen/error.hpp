// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <stdexcept>
#include <string>

namespace esscreen {

struct invalid_parameter : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct infeasible_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what)
{
    if (!ok) throw invalid_parameter(what);
}

} // namespace esscreen
