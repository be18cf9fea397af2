#pragma once

#include "hdnn/errors.hpp"
#include "hdnn/gradcheck.hpp"
#include "hdnn/lattice.hpp"
#include "hdnn/losses.hpp"
#include "hdnn/matrix.hpp"
#include "hdnn/model_io.hpp"
#include "hdnn/network.hpp"
#include "hdnn/random.hpp"
#include "hdnn/run_io.hpp"
#include "hdnn/synthetic.hpp"
#include "hdnn/text_io.hpp"
#include "hdnn/training.hpp"
