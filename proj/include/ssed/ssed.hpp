#pragma once
// Umbrella header.

#include "ssed/csv.hpp"
#include "ssed/dataset.hpp"
#include "ssed/eval.hpp"
#include "ssed/fft.hpp"
#include "ssed/model.hpp"
#include "ssed/okada.hpp"
#include "ssed/pipeline.hpp"
#include "ssed/random.hpp"
#include "ssed/series.hpp"
#include "ssed/series_io.hpp"
#include "ssed/synthgen.hpp"
#include "ssed/tensor.hpp"
#include "ssed/training.hpp"
