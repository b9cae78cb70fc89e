#pragma once

// Umbrella header for the library modules (the CLI lives in exact/cli.hpp).

#include "exact/corpus.hpp"
#include "exact/error.hpp"
#include "exact/exposure.hpp"
#include "exact/numeric.hpp"
#include "exact/objective.hpp"
#include "exact/packer.hpp"
#include "exact/probe.hpp"
#include "exact/toylm.hpp"
#include "exact/version.hpp"
#include "exact/weights.hpp"
