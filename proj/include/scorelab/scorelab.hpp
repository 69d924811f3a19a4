#pragma once

// Umbrella header: the full laboratory.

#include "scorelab/common.hpp"
#include "scorelab/measure_ot.hpp"
#include "scorelab/dimension.hpp"
#include "scorelab/diffusion_process.hpp"
#include "scorelab/score_oracle.hpp"
#include "scorelab/reverse_sampler.hpp"
#include "scorelab/score_model.hpp"
#include "scorelab/harness.hpp"
