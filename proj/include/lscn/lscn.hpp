#pragma once

#include "lscn/checkpoint.hpp"
#include "lscn/classifier.hpp"
#include "lscn/common.hpp"
#include "lscn/datamodel.hpp"
#include "lscn/detsim.hpp"
#include "lscn/eval.hpp"
#include "lscn/fusion.hpp"
#include "lscn/geometry.hpp"
#include "lscn/image.hpp"
#include "lscn/losses.hpp"
#include "lscn/netcore.hpp"
#include "lscn/parallel.hpp"
#include "lscn/random.hpp"
#include "lscn/sampler.hpp"
#include "lscn/trainer.hpp"
#include "lscn/benchmark.hpp"
#include "lscn/plot.hpp"
