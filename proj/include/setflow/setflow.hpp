#pragma once

#include "setflow/adam.hpp"
#include "setflow/autodiff.hpp"
#include "setflow/data.hpp"
#include "setflow/eval.hpp"
#include "setflow/mil.hpp"
#include "setflow/net.hpp"
#include "setflow/pca.hpp"
#include "setflow/pipeline.hpp"
#include "setflow/rng.hpp"
#include "setflow/sampler.hpp"
#include "setflow/tensor.hpp"
#include "setflow/train.hpp"
