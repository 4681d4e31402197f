#pragma once

#include "jmcox/errors.hpp"
#include "jmcox/model.hpp"
#include "jmcox/covariate_model.hpp"
#include "jmcox/quadrature.hpp"
#include "jmcox/posterior.hpp"
#include "jmcox/npml_fit.hpp"
#include "jmcox/baseline_cox.hpp"
#include "jmcox/variance.hpp"
#include "jmcox/simulate.hpp"
#include "jmcox/io.hpp"
#include "jmcox/study.hpp"
