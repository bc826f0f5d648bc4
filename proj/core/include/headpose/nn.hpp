#pragma once

#include "headpose/nn/adam.hpp"
#include "headpose/nn/layers.hpp"
#include "headpose/nn/model.hpp"
#include "headpose/nn/tensor.hpp"
#include "headpose/nn/train.hpp"
