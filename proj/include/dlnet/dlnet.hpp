#pragma once

// Umbrella header for the whole library.

#include "dlnet/analyzer.hpp"
#include "dlnet/descent.hpp"
#include "dlnet/error.hpp"
#include "dlnet/instance.hpp"
#include "dlnet/io.hpp"
#include "dlnet/linalg.hpp"
#include "dlnet/network.hpp"
#include "dlnet/oracle.hpp"
#include "dlnet/perturbation.hpp"
#include "dlnet/rng.hpp"
#include "dlnet/train.hpp"
#include "dlnet/verify.hpp"
