#pragma once
// Umbrella header.

#include "ddm/checkpoint.hpp"
#include "ddm/data_pipeline.hpp"
#include "ddm/diffusion_schedule.hpp"
#include "ddm/field_ops.hpp"
#include "ddm/generator.hpp"
#include "ddm/grid.hpp"
#include "ddm/losses_metrics.hpp"
#include "ddm/networks.hpp"
#include "ddm/nifti.hpp"
#include "ddm/optim.hpp"
#include "ddm/png.hpp"
#include "ddm/trainer.hpp"
