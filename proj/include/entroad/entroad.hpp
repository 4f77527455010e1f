#pragma once

#include "entroad/bundle.hpp"
#include "entroad/config.hpp"
#include "entroad/entropy.hpp"
#include "entroad/error.hpp"
#include "entroad/image_io.hpp"
#include "entroad/inference.hpp"
#include "entroad/memory.hpp"
#include "entroad/metrics.hpp"
#include "entroad/model.hpp"
#include "entroad/parallel.hpp"
#include "entroad/pipeline.hpp"
#include "entroad/predictions.hpp"
#include "entroad/prompt.hpp"
#include "entroad/routing.hpp"
#include "entroad/synthetic.hpp"
#include "entroad/tensor.hpp"
#include "entroad/tensor_io.hpp"
#include "entroad/training.hpp"
