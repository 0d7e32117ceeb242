#pragma once

#include "bnadapt/numcore/autograd.hpp"
#include "bnadapt/numcore/batchnorm.hpp"
#include "bnadapt/numcore/ops.hpp"
#include "bnadapt/numcore/optim.hpp"
#include "bnadapt/numcore/random.hpp"
#include "bnadapt/numcore/tensor.hpp"
