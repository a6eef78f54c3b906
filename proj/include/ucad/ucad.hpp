// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "ucad/backbone.hpp"
#include "ucad/backbone_io.hpp"
#include "ucad/dataset.hpp"
#include "ucad/engine.hpp"
#include "ucad/error.hpp"
#include "ucad/evaluation.hpp"
#include "ucad/experts.hpp"
#include "ucad/lora.hpp"
#include "ucad/numerics/ops.hpp"
#include "ucad/numerics/tensor.hpp"
#include "ucad/numerics/uten.hpp"
#include "ucad/random.hpp"
#include "ucad/trainer.hpp"
#include "ucad/uel.hpp"
