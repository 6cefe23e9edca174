// Copyright 2026 The esscreen Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include "esscreen/adaptive.hpp"
#include "esscreen/bounds.hpp"
#include "esscreen/error.hpp"
#include "esscreen/harness.hpp"
#include "esscreen/model.hpp"
#include "esscreen/parallel.hpp"
#include "esscreen/planner.hpp"
#include "esscreen/policy_net.hpp"
#include "esscreen/rng.hpp"
#include "esscreen/screener.hpp"
