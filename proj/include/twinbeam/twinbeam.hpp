#pragma once

#include "twinbeam/error.hpp"
#include "twinbeam/image.hpp"
#include "twinbeam/stackio.hpp"
#include "twinbeam/parallel.hpp"
#include "twinbeam/rng.hpp"
#include "twinbeam/fft.hpp"
#include "twinbeam/spectrum.hpp"
#include "twinbeam/simgen.hpp"
#include "twinbeam/specorr.hpp"
#include "twinbeam/gfit.hpp"
#include "twinbeam/eprstat.hpp"
#include "twinbeam/sqz.hpp"
