#pragma once

#include "otafl/algorithms.hpp"
#include "otafl/channel.hpp"
#include "otafl/common.hpp"
#include "otafl/dataset.hpp"
#include "otafl/harness/config.hpp"
#include "otafl/harness/experiment.hpp"
#include "otafl/objectives.hpp"
#include "otafl/oracles.hpp"
#include "otafl/partition.hpp"
#include "otafl/rng.hpp"
