#pragma once

// Everything, for tools and tests that want one include.
#include "clarga/errors.hpp"
#include "clarga/rng.hpp"
#include "clarga/tensor.hpp"
#include "clarga/ops.hpp"
#include "clarga/spectral.hpp"
#include "clarga/encoders.hpp"
#include "clarga/graph_fusion.hpp"
#include "clarga/objective.hpp"
#include "clarga/datagen.hpp"
#include "clarga/model.hpp"
#include "clarga/config.hpp"
#include "clarga/checkpoint.hpp"
#include "clarga/diagnostics.hpp"
#include "clarga/trainer.hpp"
#include "clarga/verify.hpp"
#include "clarga/experiment.hpp"
