#pragma once

#include "ew/bounded_queue.hpp"
#include "ew/config.hpp"
#include "ew/diffusion.hpp"
#include "ew/errors.hpp"
#include "ew/fusion.hpp"
#include "ew/generator.hpp"
#include "ew/gradcheck.hpp"
#include "ew/losses.hpp"
#include "ew/optim.hpp"
#include "ew/params.hpp"
#include "ew/report.hpp"
#include "ew/rng.hpp"
#include "ew/rope_attention.hpp"
#include "ew/streamer.hpp"
#include "ew/tensor.hpp"
#include "ew/trainer.hpp"
#include "ew/verify.hpp"
#include "ew/video.hpp"
