// SPDX-License-Identifier: Apache-2.0
// Umbrella header for the whole library.
#pragma once

#include "magical/adapter.hpp"
#include "magical/checkpoint.hpp"
#include "magical/contrastive.hpp"
#include "magical/corpus.hpp"
#include "magical/experiments.hpp"
#include "magical/grad_check.hpp"
#include "magical/metrics.hpp"
#include "magical/model.hpp"
#include "magical/probing.hpp"
#include "magical/random.hpp"
#include "magical/switch_control.hpp"
#include "magical/table.hpp"
#include "magical/tensor.hpp"
