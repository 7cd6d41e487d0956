#ifndef PEFTPROF_PEFTPROF_HPP
#define PEFTPROF_PEFTPROF_HPP

#include "peftprof/builders.hpp"
#include "peftprof/engine.hpp"
#include "peftprof/error.hpp"
#include "peftprof/flops.hpp"
#include "peftprof/grad_flow.hpp"
#include "peftprof/graph.hpp"
#include "peftprof/graph_io.hpp"
#include "peftprof/linalg.hpp"
#include "peftprof/memory.hpp"
#include "peftprof/optim.hpp"
#include "peftprof/peft.hpp"
#include "peftprof/report.hpp"
#include "peftprof/toy_gen.hpp"
#include "peftprof/train.hpp"
#include "peftprof/verify.hpp"

#endif  // PEFTPROF_PEFTPROF_HPP
