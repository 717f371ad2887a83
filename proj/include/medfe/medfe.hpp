#pragma once

#include "medfe/checkpoint.hpp"
#include "medfe/conv.hpp"
#include "medfe/data.hpp"
#include "medfe/equalization.hpp"
#include "medfe/errors.hpp"
#include "medfe/grad_check.hpp"
#include "medfe/image_io.hpp"
#include "medfe/layers.hpp"
#include "medfe/losses.hpp"
#include "medfe/metrics.hpp"
#include "medfe/network.hpp"
#include "medfe/ops.hpp"
#include "medfe/optim.hpp"
#include "medfe/random.hpp"
#include "medfe/selftest.hpp"
#include "medfe/tensor.hpp"
#include "medfe/train.hpp"
