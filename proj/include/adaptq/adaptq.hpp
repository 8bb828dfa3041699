#pragma once

#include "errors.hpp"
#include "interaction.hpp"
#include "latent_model.hpp"
#include "metrics.hpp"
#include "planted.hpp"
#include "random.hpp"
#include "selection.hpp"
#include "simulation.hpp"
#include "survey.hpp"
#include "synthetic.hpp"
