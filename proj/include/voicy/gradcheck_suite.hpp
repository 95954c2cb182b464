// SPDX-License-Identifier: Apache-2.0
//
// The fixed set of gradient checks run by `voicy gradcheck` and the tests:
// one small graph per layer kind plus the composite training loss.
#pragma once

#include <string>
#include <vector>

#include "voicy/gradcheck.hpp"
#include "voicy/model.hpp"

namespace voicy {

struct GradCheckCase {
  std::string name;
  grad::GradCheckReport report;
};

/// Narrow model with the full architecture, cheap enough to difference.
ModelConfig gradcheck_model_config(std::uint64_t seed);

/// Random pair with `frames` frames over a narrow model's inventory.
UtterancePair gradcheck_pair(const ModelConfig& config, int frames, std::uint64_t seed);

/// Full loss of `model` on `pair` checked against central differences.
grad::GradCheckReport gradient_check_loss(VoicyModel& model, const UtterancePair& pair,
                                          const grad::GradCheckConfig& cfg);

std::vector<GradCheckCase> run_gradcheck_suite(const grad::GradCheckConfig& cfg, bool include_model = true);

}  // namespace voicy
