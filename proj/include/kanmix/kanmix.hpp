#pragma once

#include "kanmix/bspline.hpp"
#include "kanmix/checkpoint.hpp"
#include "kanmix/dataset.hpp"
#include "kanmix/errors.hpp"
#include "kanmix/kan_linear.hpp"
#include "kanmix/mixer.hpp"
#include "kanmix/rng.hpp"
#include "kanmix/tensor.hpp"
#include "kanmix/training.hpp"
