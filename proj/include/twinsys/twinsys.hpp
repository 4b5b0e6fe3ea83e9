#pragma once

// Umbrella header for the twinsys library: an opaque feed-forward network
// paired with a weighted k-NN case-based twin that explains the network's
// predictions by precedent, feature weights, and feature-activation maps.

#include "twinsys/common.hpp"
#include "twinsys/dataset.hpp"
#include "twinsys/evaluation.hpp"
#include "twinsys/explanation.hpp"
#include "twinsys/io.hpp"
#include "twinsys/network.hpp"
#include "twinsys/retrieval.hpp"
#include "twinsys/rng.hpp"
#include "twinsys/tensor.hpp"
#include "twinsys/weighting.hpp"
