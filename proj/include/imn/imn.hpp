#pragma once

// Everything in one include.

#include "imn/ablation.hpp"
#include "imn/config.hpp"
#include "imn/dataio.hpp"
#include "imn/diffgraph.hpp"
#include "imn/embeddings.hpp"
#include "imn/errors.hpp"
#include "imn/evaluation.hpp"
#include "imn/model.hpp"
#include "imn/objectives.hpp"
#include "imn/synthgen.hpp"
#include "imn/toy.hpp"
#include "imn/training.hpp"
