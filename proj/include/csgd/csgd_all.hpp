#pragma once

#include "csgd/checkpoint.hpp"
#include "csgd/clustering.hpp"
#include "csgd/config.hpp"
#include "csgd/constraints.hpp"
#include "csgd/csgd.hpp"
#include "csgd/data.hpp"
#include "csgd/errors.hpp"
#include "csgd/gradcheck.hpp"
#include "csgd/metrics.hpp"
#include "csgd/model.hpp"
#include "csgd/network_spec.hpp"
#include "csgd/ops.hpp"
#include "csgd/pipelines.hpp"
#include "csgd/tape.hpp"
#include "csgd/tensor.hpp"
#include "csgd/train.hpp"
#include "csgd/trim.hpp"
