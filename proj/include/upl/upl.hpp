// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "upl/adaptation.hpp"
#include "upl/binary_io.hpp"
#include "upl/checkpoint.hpp"
#include "upl/config.hpp"
#include "upl/labels.hpp"
#include "upl/losses.hpp"
#include "upl/metrics.hpp"
#include "upl/model.hpp"
#include "upl/ops.hpp"
#include "upl/optim.hpp"
#include "upl/pseudolabel.hpp"
#include "upl/rng.hpp"
#include "upl/synthdata.hpp"
#include "upl/tensor.hpp"
#include "upl/transforms.hpp"
