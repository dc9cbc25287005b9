#pragma once

#include "ciss/adc.hpp"
#include "ciss/config.hpp"
#include "ciss/data_synth.hpp"
#include "ciss/error.hpp"
#include "ciss/harness.hpp"
#include "ciss/losses.hpp"
#include "ciss/metrics.hpp"
#include "ciss/prototype_store.hpp"
#include "ciss/segmodel.hpp"
#include "ciss/tensor.hpp"
#include "ciss/uncertainty.hpp"
