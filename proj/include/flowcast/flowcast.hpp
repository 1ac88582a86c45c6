#pragma once

// Umbrella header for the flowcast short-term traffic forecasting library.

#include "flowcast/dataset.hpp"
#include "flowcast/eval.hpp"
#include "flowcast/flow_series.hpp"
#include "flowcast/glasso.hpp"
#include "flowcast/gpr.hpp"
#include "flowcast/models.hpp"
#include "flowcast/network.hpp"
#include "flowcast/nn.hpp"
#include "flowcast/parallel.hpp"
#include "flowcast/report.hpp"
#include "flowcast/util.hpp"
