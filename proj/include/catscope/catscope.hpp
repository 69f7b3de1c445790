#pragma once

#include "catscope/error.hpp"
#include "catscope/rng.hpp"
#include "catscope/fock.hpp"
#include "catscope/wigner.hpp"
#include "catscope/open_system.hpp"
#include "catscope/dm_model.hpp"
#include "catscope/measurement.hpp"
#include "catscope/hmm.hpp"
#include "catscope/analysis.hpp"
#include "catscope/config.hpp"
#include "catscope/pipeline.hpp"
