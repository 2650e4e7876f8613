#pragma once

// Umbrella header.

#include "cmfuse/attention.hpp"
#include "cmfuse/checkpoint.hpp"
#include "cmfuse/config.hpp"
#include "cmfuse/data.hpp"
#include "cmfuse/encoder.hpp"
#include "cmfuse/eval.hpp"
#include "cmfuse/fusion.hpp"
#include "cmfuse/heatmap.hpp"
#include "cmfuse/image.hpp"
#include "cmfuse/metrics.hpp"
#include "cmfuse/model.hpp"
#include "cmfuse/ops.hpp"
#include "cmfuse/optim.hpp"
#include "cmfuse/rng.hpp"
#include "cmfuse/serialize.hpp"
#include "cmfuse/tensor.hpp"
#include "cmfuse/tokenizer.hpp"
#include "cmfuse/train.hpp"
