#pragma once

#include "deqfl/errors.hpp"
#include "deqfl/linalg.hpp"
#include "deqfl/rng.hpp"
#include "deqfl/deq.hpp"
#include "deqfl/model.hpp"
#include "deqfl/checkpoint.hpp"
#include "deqfl/data.hpp"
#include "deqfl/federation.hpp"
#include "deqfl/gradcheck.hpp"
#include "deqfl/config.hpp"
#include "deqfl/metrics_io.hpp"
