#pragma once

#include "abstain/error.hpp"
#include "abstain/rng.hpp"
#include "abstain/diffmath.hpp"
#include "abstain/corpus.hpp"
#include "abstain/pairing.hpp"
#include "abstain/model.hpp"
#include "abstain/loss.hpp"
#include "abstain/train.hpp"
#include "abstain/metrics.hpp"
#include "abstain/config.hpp"
#include "abstain/evalx.hpp"
#include "abstain/commands.hpp"
