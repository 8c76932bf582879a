#pragma once

#include <map>
#include <string>

#include "apex/assessment.hpp"
#include "apex/expansion.hpp"
#include "apex/model.hpp"
#include "apex/staging.hpp"

namespace apex {

// Everything a stage boundary needs to resume, including operators that are
// still live. Binary layout (little-endian throughout):
//   magic "APEX", version u32,
//   config blob: length u32 + UTF-8 key=value lines,
//   record count u32,
//   per record: name length u32, name, dtype u8 (0=f32, 1=f64, 2=i64),
//               ndim u32, dims u64 each, raw data.
// Records are looked up by name, so their order never matters on load.
struct CheckpointState {
    ModelConfig cfg;
    StagePlan plan;
    ModelParams params;
    OperatorBundle operators;
    ActivationLedger ledger;
    std::map<std::string, std::string> extra;  // free-form provenance lines
};

constexpr uint32_t kCheckpointVersion = 1;

// Atomic: writes to a temp file then renames over the target.
void save_checkpoint(const std::string& path, const CheckpointState& state);

CheckpointState load_checkpoint(const std::string& path);

}  // namespace apex
