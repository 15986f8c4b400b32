#pragma once

#include "leakgan/checkpoint.hpp"
#include "leakgan/config.hpp"
#include "leakgan/data.hpp"
#include "leakgan/discriminator.hpp"
#include "leakgan/error.hpp"
#include "leakgan/evaluation.hpp"
#include "leakgan/generator.hpp"
#include "leakgan/image_io.hpp"
#include "leakgan/layers.hpp"
#include "leakgan/losses.hpp"
#include "leakgan/mean_teacher.hpp"
#include "leakgan/optim.hpp"
#include "leakgan/patch_ops.hpp"
#include "leakgan/rng.hpp"
#include "leakgan/synth.hpp"
#include "leakgan/tensor.hpp"
#include "leakgan/trainer.hpp"
#include "leakgan/types.hpp"
