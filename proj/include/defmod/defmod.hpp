// Copyright 2026 The defmod Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "defmod/attention.hpp"
#include "defmod/batching.hpp"
#include "defmod/checkpoint.hpp"
#include "defmod/config.hpp"
#include "defmod/datasets.hpp"
#include "defmod/embeddings.hpp"
#include "defmod/error.hpp"
#include "defmod/evaluation.hpp"
#include "defmod/gradcheck.hpp"
#include "defmod/gradcheck_suite.hpp"
#include "defmod/marking.hpp"
#include "defmod/ops.hpp"
#include "defmod/optim.hpp"
#include "defmod/pipeline.hpp"
#include "defmod/random.hpp"
#include "defmod/tensor.hpp"
#include "defmod/training.hpp"
#include "defmod/transformer.hpp"
#include "defmod/vocab.hpp"
