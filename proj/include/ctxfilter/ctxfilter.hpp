#pragma once

// Umbrella header. Individual headers are fine to include directly; the CLI
// and tests mostly want everything.

#include "ctxfilter/conversation.hpp"
#include "ctxfilter/corpus.hpp"
#include "ctxfilter/digest.hpp"
#include "ctxfilter/errors.hpp"
#include "ctxfilter/featurizer.hpp"
#include "ctxfilter/gateway.hpp"
#include "ctxfilter/judging.hpp"
#include "ctxfilter/learner.hpp"
#include "ctxfilter/message.hpp"
#include "ctxfilter/ndjson.hpp"
#include "ctxfilter/orchestrator.hpp"
#include "ctxfilter/policy.hpp"
#include "ctxfilter/random.hpp"
#include "ctxfilter/templates.hpp"
