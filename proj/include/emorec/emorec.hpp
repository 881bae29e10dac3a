#pragma once

// Facial-emotion recognition toolkit: Haar-cascade face/mouth detection,
// small convolutional classifiers trained with ADAM, and the evaluation
// plumbing around them. Header-only; include this or the individual pieces.

#include "cli.hpp"
#include "datapipe.hpp"
#include "errors.hpp"
#include "haar.hpp"
#include "metrics.hpp"
#include "net.hpp"
#include "solver.hpp"
#include "tensor.hpp"
