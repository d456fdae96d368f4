// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dmf/tensor.hpp"
#include "dmf/autodiff.hpp"
#include "dmf/params.hpp"
#include "dmf/ops.hpp"
#include "dmf/finite_diff.hpp"
#include "dmf/serialize.hpp"
#include "dmf/backbone.hpp"
#include "dmf/sampler.hpp"
#include "dmf/meta_filter.hpp"
#include "dmf/ode.hpp"
#include "dmf/heads.hpp"
#include "dmf/data.hpp"
#include "dmf/model.hpp"
#include "dmf/train.hpp"
#include "dmf/config.hpp"
