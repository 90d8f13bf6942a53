#pragma once

#include "rcn/tensor.hpp"
#include "rcn/ops.hpp"
#include "rcn/params.hpp"
#include "rcn/backbone.hpp"
#include "rcn/matcher.hpp"
#include "rcn/explainer.hpp"
#include "rcn/episodes.hpp"
#include "rcn/model.hpp"
#include "rcn/trainer.hpp"
#include "rcn/interpret.hpp"
#include "rcn/checkpoint.hpp"
