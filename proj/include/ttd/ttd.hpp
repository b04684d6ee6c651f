#pragma once

// Convenience header pulling in the whole library.

#include "ttd/checkpoint.hpp"
#include "ttd/contamination.hpp"
#include "ttd/csv.hpp"
#include "ttd/datasets.hpp"
#include "ttd/errors.hpp"
#include "ttd/evalbench.hpp"
#include "ttd/io.hpp"
#include "ttd/model.hpp"
#include "ttd/ops.hpp"
#include "ttd/parallel.hpp"
#include "ttd/rng.hpp"
#include "ttd/tensor.hpp"
#include "ttd/tokenizer.hpp"
#include "ttd/trainer.hpp"
#include "ttd/unicode.hpp"
