#pragma once

#include "codevae/adam.hpp"
#include "codevae/checkpoint.hpp"
#include "codevae/consensus.hpp"
#include "codevae/consensus_check.hpp"
#include "codevae/dataset.hpp"
#include "codevae/elbo.hpp"
#include "codevae/error.hpp"
#include "codevae/eval.hpp"
#include "codevae/gaussian.hpp"
#include "codevae/kvfile.hpp"
#include "codevae/mlp.hpp"
#include "codevae/model.hpp"
#include "codevae/tape.hpp"
#include "codevae/trainer.hpp"
