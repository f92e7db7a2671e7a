#pragma once

#include "nightfuse/error.hpp"
#include "nightfuse/rng.hpp"
#include "nightfuse/raster.hpp"
#include "nightfuse/dataset.hpp"
#include "nightfuse/schedule.hpp"
#include "nightfuse/tensor.hpp"
#include "nightfuse/autodiff.hpp"
#include "nightfuse/ops.hpp"
#include "nightfuse/network.hpp"
#include "nightfuse/checkpoint.hpp"
#include "nightfuse/model.hpp"
#include "nightfuse/train.hpp"
#include "nightfuse/sample.hpp"
#include "nightfuse/evaluate.hpp"
#include "nightfuse/bench.hpp"
#include "nightfuse/config.hpp"
#include "nightfuse/pipeline.hpp"
