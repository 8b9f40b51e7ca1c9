#pragma once

#include "biobred/constants.hpp"
#include "biobred/counters.hpp"
#include "biobred/exact.hpp"
#include "biobred/experiment.hpp"
#include "biobred/hypergrad.hpp"
#include "biobred/mirror.hpp"
#include "biobred/problem.hpp"
#include "biobred/rng.hpp"
#include "biobred/solvers.hpp"
#include "biobred/testbed/hyperclean.hpp"
#include "biobred/testbed/quadratic.hpp"
#include "biobred/trace.hpp"
#include "biobred/types.hpp"
