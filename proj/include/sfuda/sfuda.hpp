#pragma once

#include "sfuda/augment.hpp"
#include "sfuda/checkpoint.hpp"
#include "sfuda/config.hpp"
#include "sfuda/consolidation.hpp"
#include "sfuda/csv.hpp"
#include "sfuda/data.hpp"
#include "sfuda/evaluate.hpp"
#include "sfuda/losses.hpp"
#include "sfuda/memory_queue.hpp"
#include "sfuda/model.hpp"
#include "sfuda/optimizer.hpp"
#include "sfuda/pipeline.hpp"
#include "sfuda/pre_adapt.hpp"
#include "sfuda/rng.hpp"
#include "sfuda/ssl.hpp"
#include "sfuda/svg_plot.hpp"
#include "sfuda/tensor.hpp"
#include "sfuda/version.hpp"
