#pragma once

// Umbrella header for the grid frequency-control toolkit.

#include "kgmpc/common.hpp"
#include "kgmpc/config.hpp"
#include "kgmpc/datagen.hpp"
#include "kgmpc/dsms.hpp"
#include "kgmpc/grid.hpp"
#include "kgmpc/harness.hpp"
#include "kgmpc/io.hpp"
#include "kgmpc/koopman.hpp"
#include "kgmpc/mpc.hpp"
#include "kgmpc/rng.hpp"
#include "kgmpc/sha256.hpp"
#include "kgmpc/sim.hpp"
