#pragma once

#include <string>

#include "tokenseg/data.hpp"
#include "tokenseg/model.hpp"
#include "tokenseg/trainer.hpp"

namespace tokenseg {

// Flat key=value config with dotted section prefixes (model.embed_dim=64).
// '#' starts a comment; blank lines are ignored. Every field except the two
// seeds has a documented default; seeds are mandatory so no run ever draws
// entropy implicitly. Unknown and duplicate keys are rejected.
struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    SplitSpec data;
    AugConfig aug;
    std::string output_dir = "runs/out";

    void validate() const;  // throws naming the offending key
    bool operator==(const ExperimentConfig&) const = default;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config(const std::string& path);

// Emits every key in a fixed order; reals use %.17g so parse(serialize(c))
// reproduces c exactly.
std::string serialize_config(const ExperimentConfig& cfg);

}  // namespace tokenseg
