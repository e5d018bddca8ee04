#pragma once

#include "imco/data.hpp"
#include "imco/dmf.hpp"
#include "imco/error.hpp"
#include "imco/harness.hpp"
#include "imco/implanting.hpp"
#include "imco/importance.hpp"
#include "imco/nn.hpp"
#include "imco/random.hpp"
#include "imco/tensor.hpp"
