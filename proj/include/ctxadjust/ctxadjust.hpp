#pragma once

#include "ctxadjust/adjustment.hpp"
#include "ctxadjust/data_model.hpp"
#include "ctxadjust/diagnostics.hpp"
#include "ctxadjust/errors.hpp"
#include "ctxadjust/forecasting.hpp"
#include "ctxadjust/gam_fit.hpp"
#include "ctxadjust/inference.hpp"
#include "ctxadjust/model_spec.hpp"
#include "ctxadjust/parallel.hpp"
#include "ctxadjust/random.hpp"
#include "ctxadjust/serialization.hpp"
#include "ctxadjust/spline_basis.hpp"
#include "ctxadjust/stats.hpp"
#include "ctxadjust/synth.hpp"
