#pragma once

#include "embgen/common.hpp"
#include "embgen/embedding_store.hpp"
#include "embgen/evalkit.hpp"
#include "embgen/gmm.hpp"
#include "embgen/hvae.hpp"
#include "embgen/sampler.hpp"
#include "embgen/synth.hpp"
#include "embgen/text_metrics.hpp"
#include "embgen/trainer.hpp"
