#pragma once

#include "ecenet/checkpoint.hpp"
#include "ecenet/class_extraction.hpp"
#include "ecenet/config.hpp"
#include "ecenet/data.hpp"
#include "ecenet/feature_reconstruction.hpp"
#include "ecenet/grad_check.hpp"
#include "ecenet/gradcheck_suite.hpp"
#include "ecenet/losses.hpp"
#include "ecenet/metrics.hpp"
#include "ecenet/model.hpp"
#include "ecenet/nn.hpp"
#include "ecenet/ops.hpp"
#include "ecenet/semantics_attention.hpp"
#include "ecenet/tape.hpp"
#include "ecenet/tensor.hpp"
#include "ecenet/tensor_io.hpp"
#include "ecenet/train.hpp"
