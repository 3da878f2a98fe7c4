#pragma once

#include "errors.hpp"
#include "random.hpp"
#include "tensor.hpp"
#include "autograd.hpp"
#include "ops.hpp"
#include "params.hpp"
#include "optim.hpp"
#include "nn.hpp"
#include "text.hpp"
#include "text_provider.hpp"
#include "binary_io.hpp"
#include "corpus.hpp"
#include "ict.hpp"
#include "encoders.hpp"
#include "training.hpp"
#include "stats.hpp"
#include "retrieval.hpp"
#include "report.hpp"
#include "pipeline.hpp"
