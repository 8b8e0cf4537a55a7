#pragma once

#include "metfa/ablation.hpp"
#include "metfa/datagen.hpp"
#include "metfa/errors.hpp"
#include "metfa/gradcheck.hpp"
#include "metfa/losses.hpp"
#include "metfa/metrics.hpp"
#include "metfa/model.hpp"
#include "metfa/optimizer.hpp"
#include "metfa/rng.hpp"
#include "metfa/tape.hpp"
#include "metfa/tensor.hpp"
#include "metfa/train.hpp"
#include "metfa/verify.hpp"
