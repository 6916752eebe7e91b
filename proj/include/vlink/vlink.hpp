#pragma once

#include "vlink/communities.hpp"
#include "vlink/embedder.hpp"
#include "vlink/error.hpp"
#include "vlink/eval.hpp"
#include "vlink/gradcheck.hpp"
#include "vlink/graph.hpp"
#include "vlink/head.hpp"
#include "vlink/index.hpp"
#include "vlink/io.hpp"
#include "vlink/matrix.hpp"
#include "vlink/metrics.hpp"
#include "vlink/objectives.hpp"
#include "vlink/random.hpp"
#include "vlink/records.hpp"
