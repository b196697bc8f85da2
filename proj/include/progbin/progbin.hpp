#pragma once

// Umbrella header.

#include "bench.hpp"
#include "binner.hpp"
#include "core.hpp"
#include "engine.hpp"
#include "metrics.hpp"
#include "refinement.hpp"
#include "schema.hpp"
#include "server.hpp"
#include "session.hpp"
#include "synth.hpp"
