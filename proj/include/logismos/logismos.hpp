#pragma once

#include "logismos/adaboost.hpp"
#include "logismos/config.hpp"
#include "logismos/costs.hpp"
#include "logismos/elf.hpp"
#include "logismos/error.hpp"
#include "logismos/evaluation.hpp"
#include "logismos/features.hpp"
#include "logismos/geometry.hpp"
#include "logismos/graph.hpp"
#include "logismos/jei.hpp"
#include "logismos/kdtree.hpp"
#include "logismos/maxflow.hpp"
#include "logismos/mesh.hpp"
#include "logismos/naf.hpp"
#include "logismos/phantom.hpp"
#include "logismos/pipeline.hpp"
#include "logismos/random.hpp"
#include "logismos/random_forest.hpp"
#include "logismos/serialize.hpp"
#include "logismos/volume.hpp"
