#pragma once

#include "hspec/bench.hpp"
#include "hspec/checkpoint.hpp"
#include "hspec/common.hpp"
#include "hspec/config.hpp"
#include "hspec/engine.hpp"
#include "hspec/heads.hpp"
#include "hspec/kernels.hpp"
#include "hspec/model.hpp"
#include "hspec/nn.hpp"
#include "hspec/optim.hpp"
#include "hspec/tensor.hpp"
#include "hspec/textgen.hpp"
#include "hspec/topology.hpp"
#include "hspec/training.hpp"
#include "hspec/tree_search.hpp"
#include "hspec/verify.hpp"
