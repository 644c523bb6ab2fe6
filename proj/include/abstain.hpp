#pragma once

#include "abstain/autodiff.hpp"
#include "abstain/config.hpp"
#include "abstain/data.hpp"
#include "abstain/error.hpp"
#include "abstain/gradcheck.hpp"
#include "abstain/gradsuite.hpp"
#include "abstain/losses.hpp"
#include "abstain/metrics.hpp"
#include "abstain/model.hpp"
#include "abstain/noise.hpp"
#include "abstain/pnm.hpp"
#include "abstain/report.hpp"
#include "abstain/rng.hpp"
#include "abstain/schedule.hpp"
#include "abstain/tensor.hpp"
#include "abstain/trainer.hpp"
