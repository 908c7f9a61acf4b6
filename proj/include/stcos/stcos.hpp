#pragma once

#include "stcos/error.hpp"
#include "stcos/rng.hpp"
#include "stcos/parallel.hpp"
#include "stcos/geometry.hpp"
#include "stcos/basis.hpp"
#include "stcos/covariance.hpp"
#include "stcos/model.hpp"
#include "stcos/sampler.hpp"
#include "stcos/pipeline.hpp"
#include "stcos/predict.hpp"
#include "stcos/simulate.hpp"
#include "stcos/io.hpp"
