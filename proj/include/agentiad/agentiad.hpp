// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "config.hpp"
#include "dataset.hpp"
#include "endpoint.hpp"
#include "errors.hpp"
#include "eval.hpp"
#include "geometry.hpp"
#include "grpo.hpp"
#include "http_endpoint.hpp"
#include "image.hpp"
#include "parallel.hpp"
#include "protocol.hpp"
#include "rewards.hpp"
#include "rollout.hpp"
#include "synthetic.hpp"
#include "text.hpp"
#include "tools.hpp"
#include "trajectory.hpp"
