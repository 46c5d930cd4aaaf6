#pragma once

#include "tensor_ties/error.hpp"
#include "tensor_ties/dtype.hpp"
#include "tensor_ties/parallel.hpp"
#include "tensor_ties/archive.hpp"
#include "tensor_ties/task_vector.hpp"
#include "tensor_ties/report.hpp"
#include "tensor_ties/ties.hpp"
#include "tensor_ties/baselines.hpp"
#include "tensor_ties/random.hpp"
#include "tensor_ties/analysis.hpp"
