#pragma once

#include "ctxmem/adapter.hpp"
#include "ctxmem/backend.hpp"
#include "ctxmem/cloze.hpp"
#include "ctxmem/common.hpp"
#include "ctxmem/consolidation.hpp"
#include "ctxmem/context.hpp"
#include "ctxmem/elicitation.hpp"
#include "ctxmem/evaluation.hpp"
#include "ctxmem/lexicon.hpp"
#include "ctxmem/linalg.hpp"
#include "ctxmem/losses.hpp"
#include "ctxmem/optimizer.hpp"
#include "ctxmem/pretrain.hpp"
#include "ctxmem/prompts.hpp"
#include "ctxmem/selection.hpp"
#include "ctxmem/streaming.hpp"
#include "ctxmem/tasks.hpp"
#include "ctxmem/tensor_io.hpp"
#include "ctxmem/tiny_transformer.hpp"
#include "ctxmem/tokenizer.hpp"
