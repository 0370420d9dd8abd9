#pragma once

// Everything: spaces and families, transport, minimizing movements, Dirichlet
// forms and heat flows, entropy flows, and the scenario harness.

#include "dynflow/dirichlet.hpp"
#include "dynflow/entropy.hpp"
#include "dynflow/error.hpp"
#include "dynflow/harness/report.hpp"
#include "dynflow/harness/runner.hpp"
#include "dynflow/harness/scenario.hpp"
#include "dynflow/mms.hpp"
#include "dynflow/quadrature.hpp"
#include "dynflow/space.hpp"
#include "dynflow/time_grid.hpp"
#include "dynflow/torus.hpp"
#include "dynflow/transport.hpp"
