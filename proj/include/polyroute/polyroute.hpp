// Copyright (c) 2026 The polyroute Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "polyroute/adapters.hpp"
#include "polyroute/backbone.hpp"
#include "polyroute/checkpoint.hpp"
#include "polyroute/config.hpp"
#include "polyroute/error.hpp"
#include "polyroute/experiment.hpp"
#include "polyroute/method.hpp"
#include "polyroute/model.hpp"
#include "polyroute/routing.hpp"
#include "polyroute/strategies.hpp"
#include "polyroute/tasks.hpp"
#include "polyroute/tensor.hpp"
#include "polyroute/trainer.hpp"
