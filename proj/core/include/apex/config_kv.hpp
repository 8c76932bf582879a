#pragma once

#include <map>
#include <string>

#include "apex/model.hpp"
#include "apex/staging.hpp"

namespace apex {

// key=value lines; '#' starts a comment, blank lines ignored.
std::map<std::string, std::string> parse_kv(const std::string& text);
std::map<std::string, std::string> read_kv_file(const std::string& path);

std::string format_double(double v);  // round-trip exact (17 significant digits)

// Applies model.* / plan.* keys onto the given structs; unknown keys with
// those prefixes are rejected, other prefixes ignored.
void apply_model_config(ModelConfig& cfg, const std::map<std::string, std::string>& kv);
void apply_stage_plan(StagePlan& plan, const std::map<std::string, std::string>& kv);

// Fixed-order serialization, parse(serialize(x)) == x.
std::string serialize_model_config(const ModelConfig& cfg);
std::string serialize_stage_plan(const StagePlan& plan);

}  // namespace apex
