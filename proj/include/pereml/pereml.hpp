#pragma once

#include "pereml/errors.hpp"
#include "pereml/linalg.hpp"
#include "pereml/design.hpp"
#include "pereml/reml.hpp"
#include "pereml/feasibility.hpp"
#include "pereml/gls.hpp"
#include "pereml/kenward_roger.hpp"
#include "pereml/analysis.hpp"
#include "pereml/simulation.hpp"
#include "pereml/io.hpp"
