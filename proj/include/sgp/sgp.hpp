#pragma once

// Sparse variational Gaussian processes with every O(N) computation reduced
// over per-datapoint sufficient statistics by a deterministic tiled
// data-parallel engine.

#include "sgp/bench.hpp"
#include "sgp/bound.hpp"
#include "sgp/common.hpp"
#include "sgp/io.hpp"
#include "sgp/kernels.hpp"
#include "sgp/model.hpp"
#include "sgp/optimizer.hpp"
#include "sgp/parallel.hpp"
#include "sgp/psi_stats.hpp"
#include "sgp/quadrature.hpp"
#include "sgp/synthetic.hpp"
