#pragma once

#include "sopool/autograd.hpp"
#include "sopool/batch.hpp"
#include "sopool/distinguish.hpp"
#include "sopool/error.hpp"
#include "sopool/folds.hpp"
#include "sopool/gradcheck.hpp"
#include "sopool/graph.hpp"
#include "sopool/layers.hpp"
#include "sopool/matrix.hpp"
#include "sopool/model.hpp"
#include "sopool/optim.hpp"
#include "sopool/pooling.hpp"
#include "sopool/results.hpp"
#include "sopool/rng.hpp"
#include "sopool/trainer.hpp"
