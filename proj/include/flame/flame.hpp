#pragma once

// Umbrella header for the FLAME sequential-recommendation library: a
// frozen-learnable modular ensemble over a SASRec-style backbone, trained
// with next-item prediction plus similarity-weighted contrastive alignment
// across all 2^M composed representation paths, deployed as the learnable
// network alone.

#include "backbone.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "ensemble.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "objectives.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "training.hpp"
