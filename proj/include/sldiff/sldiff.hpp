#pragma once

#include "checkpoint.hpp"
#include "data_io.hpp"
#include "diffusion.hpp"
#include "dissemination.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "graph.hpp"
#include "kernel.hpp"
#include "nn.hpp"
#include "pipeline.hpp"
#include "positional.hpp"
#include "rng.hpp"
#include "schedule.hpp"
#include "score_net.hpp"
