#pragma once

#include "atup/autodiff.hpp"
#include "atup/bench.hpp"
#include "atup/errors.hpp"
#include "atup/fast.hpp"
#include "atup/image_io.hpp"
#include "atup/models.hpp"
#include "atup/ops.hpp"
#include "atup/reference.hpp"
#include "atup/synth.hpp"
#include "atup/tensor.hpp"
#include "atup/train.hpp"
