#pragma once

#include "c2f/attention.hpp"
#include "c2f/autograd.hpp"
#include "c2f/decoder.hpp"
#include "c2f/encoder.hpp"
#include "c2f/grad_check.hpp"
#include "c2f/metrics.hpp"
#include "c2f/model.hpp"
#include "c2f/objective.hpp"
#include "c2f/scenes.hpp"
#include "c2f/train.hpp"
#include "c2f/viz.hpp"
