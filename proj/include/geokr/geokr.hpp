#pragma once

// Convenience include for the whole library.

#include "geokr/analyze.hpp"
#include "geokr/error.hpp"
#include "geokr/geoknow.hpp"
#include "geokr/ingest.hpp"
#include "geokr/nnet.hpp"
#include "geokr/raster.hpp"
#include "geokr/rng.hpp"
#include "geokr/synth.hpp"
#include "geokr/tensor.hpp"
#include "geokr/trainer.hpp"
