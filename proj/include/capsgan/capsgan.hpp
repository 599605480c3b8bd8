#pragma once

#include "capsgan/autodiff.hpp"
#include "capsgan/capsnet.hpp"
#include "capsgan/checkpoint.hpp"
#include "capsgan/commands.hpp"
#include "capsgan/config.hpp"
#include "capsgan/datasets.hpp"
#include "capsgan/errors.hpp"
#include "capsgan/evaluation.hpp"
#include "capsgan/gan.hpp"
#include "capsgan/hash.hpp"
#include "capsgan/image_io.hpp"
#include "capsgan/log.hpp"
#include "capsgan/optim.hpp"
#include "capsgan/rng.hpp"
#include "capsgan/tensor.hpp"
