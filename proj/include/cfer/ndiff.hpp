// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cfer/ndiff/gradcheck.hpp"
#include "cfer/ndiff/ops.hpp"
#include "cfer/ndiff/tape.hpp"
#include "cfer/ndiff/tensor.hpp"
