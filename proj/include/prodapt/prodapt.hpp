#pragma once

// Umbrella header.

#include "prodapt/adapters.hpp"
#include "prodapt/bench.hpp"
#include "prodapt/checkpoint.hpp"
#include "prodapt/common.hpp"
#include "prodapt/configfile.hpp"
#include "prodapt/corpus.hpp"
#include "prodapt/cv.hpp"
#include "prodapt/engine.hpp"
#include "prodapt/forward.hpp"
#include "prodapt/model.hpp"
#include "prodapt/report.hpp"
#include "prodapt/svm.hpp"
#include "prodapt/tensor.hpp"
#include "prodapt/train.hpp"
