#pragma once

#include "arseg/ablation.hpp"
#include "arseg/arsg_io.hpp"
#include "arseg/autoencoder.hpp"
#include "arseg/checkpoint.hpp"
#include "arseg/codebook.hpp"
#include "arseg/config.hpp"
#include "arseg/consensus.hpp"
#include "arseg/data_synth.hpp"
#include "arseg/evaluate.hpp"
#include "arseg/hungarian.hpp"
#include "arseg/image_adapter.hpp"
#include "arseg/metrics.hpp"
#include "arseg/models.hpp"
#include "arseg/optim.hpp"
#include "arseg/png.hpp"
#include "arseg/segmentor.hpp"
#include "arseg/trainer.hpp"
