#pragma once

// Umbrella header for the matrix-free DG transport solver library.

#include "lbt/bench.hpp"
#include "lbt/errors.hpp"
#include "lbt/estimators.hpp"
#include "lbt/fespace.hpp"
#include "lbt/manufactured.hpp"
#include "lbt/mesh.hpp"
#include "lbt/operators.hpp"
#include "lbt/physics.hpp"
#include "lbt/quadrature.hpp"
#include "lbt/solvers.hpp"
