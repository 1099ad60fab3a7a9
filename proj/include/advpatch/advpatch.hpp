#pragma once

#include "advpatch/augmentation.hpp"
#include "advpatch/common.hpp"
#include "advpatch/compositor.hpp"
#include "advpatch/config.hpp"
#include "advpatch/core.hpp"
#include "advpatch/datasets.hpp"
#include "advpatch/detector.hpp"
#include "advpatch/evaluation.hpp"
#include "advpatch/losses.hpp"
#include "advpatch/metrics.hpp"
#include "advpatch/nn.hpp"
#include "advpatch/plot.hpp"
#include "advpatch/png_io.hpp"
#include "advpatch/trainer.hpp"
