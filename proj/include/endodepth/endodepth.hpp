#pragma once

#include "endodepth/annotations.hpp"
#include "endodepth/autodiff.hpp"
#include "endodepth/dataset_io.hpp"
#include "endodepth/errors.hpp"
#include "endodepth/eval.hpp"
#include "endodepth/geometry.hpp"
#include "endodepth/gradcheck.hpp"
#include "endodepth/layers.hpp"
#include "endodepth/losses.hpp"
#include "endodepth/model.hpp"
#include "endodepth/pipeline.hpp"
#include "endodepth/raster.hpp"
#include "endodepth/scene_sim.hpp"
#include "endodepth/supervision.hpp"
#include "endodepth/trainer.hpp"
