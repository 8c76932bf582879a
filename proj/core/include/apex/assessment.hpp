#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "apex/model.hpp"

namespace apex {

enum class ModuleKind { Mha, Ffn };

enum class Strategy { Rank, Avg, Random };

// Streaming advantage statistics for one (layer, module) pair.
struct ModuleLedger {
    std::vector<int64_t> score;    // Top-K membership count minus Min-K count
    std::vector<double> norm_sum;  // running sum of per-sample norms
};

struct ActivationLedger {
    int64_t samples_seen = 0;
    std::vector<ModuleLedger> mha;  // per layer, length H each
    std::vector<ModuleLedger> ffn;  // per layer, length d_ffn each

    static ActivationLedger make(const ModelConfig& cfg);
    void reset();
};

// Advantageous / disadvantageous index sets per layer and module.
struct AdvantageSets {
    struct ModuleSets {
        std::vector<int> p;  // advantageous, sorted ascending
        std::vector<int> n;  // disadvantageous, sorted ascending
    };
    std::vector<ModuleSets> mha;
    std::vector<ModuleSets> ffn;
    double k_mha = 0.0;
    double k_ffn = 0.0;
};

// floor(n * K) clamped to >= 1. K must lie in (0, 0.25].
int component_count(int n_components, double k_proportion);

// Deterministic Top-k / Min-k index selection; ties go to the lower index.
std::vector<int> top_k_indices(const std::vector<double>& values, int k);
std::vector<int> min_k_indices(const std::vector<double>& values, int k);

// Scores one sample's norms into a module ledger: +1 for Top-k members,
// -1 for Min-k members, k = component_count(n, K). Running sums updated.
void update_scores(ModuleLedger& ledger, const std::vector<float>& norms, double k_proportion);

// Scores one sample's full trace and bumps samples_seen.
void update_ledger(ActivationLedger& ledger, const ForwardTrace& trace, double k_mha,
                   double k_ffn);

AdvantageSets select_sets(const ActivationLedger& ledger, double k_mha, double k_ffn,
                          Strategy strategy, uint64_t seed);

struct StdReportRow {
    int layer;
    ModuleKind kind;
    double mean_of_means;
    double std_of_means;  // population std across components of mean norms
};

std::vector<StdReportRow> activation_std_report(const ActivationLedger& ledger);

// Zeroes the weight-space contribution of the given components. MHA head h:
// W_V columns and W_O rows of the head block; FFN channel c: W_G column c.
ModelParams mask_components(const ModelParams& params, int layer, ModuleKind kind,
                            const std::vector<int>& indices);

// One probe-stats row per component: layer, module, component, mean_norm, score.
void write_probe_stats(const ActivationLedger& ledger, std::ostream& os, bool csv);

const char* module_kind_name(ModuleKind kind);
const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

}  // namespace apex
