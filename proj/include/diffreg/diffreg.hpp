#pragma once

#include "diffreg/baseline.hpp"
#include "diffreg/dar.hpp"
#include "diffreg/dataset.hpp"
#include "diffreg/error.hpp"
#include "diffreg/error_model.hpp"
#include "diffreg/eval.hpp"
#include "diffreg/gradcheck.hpp"
#include "diffreg/inference.hpp"
#include "diffreg/objective.hpp"
#include "diffreg/parallel.hpp"
#include "diffreg/pipeline.hpp"
#include "diffreg/random.hpp"
#include "diffreg/retrieval.hpp"
#include "diffreg/training.hpp"
