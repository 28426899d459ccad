#pragma once

// Convenience header pulling in the whole library.

#include "trendmatch/tensor.hpp"
#include "trendmatch/ops.hpp"
#include "trendmatch/adam.hpp"
#include "trendmatch/distances.hpp"
#include "trendmatch/network.hpp"
#include "trendmatch/supervision.hpp"
#include "trendmatch/trend.hpp"
#include "trendmatch/metrics.hpp"
#include "trendmatch/synthdata.hpp"
#include "trendmatch/png_io.hpp"
#include "trendmatch/dataset_io.hpp"
#include "trendmatch/parallel.hpp"
#include "trendmatch/config.hpp"
#include "trendmatch/checkpoint.hpp"
#include "trendmatch/trainer.hpp"
