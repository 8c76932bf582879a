#include "apex/assessment.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>

#include "apex/errors.hpp"
#include "apex/rng.hpp"

namespace apex {

ActivationLedger ActivationLedger::make(const ModelConfig& cfg) {
    ActivationLedger l;
    l.mha.resize(static_cast<size_t>(cfg.n_layers));
    l.ffn.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& m : l.mha) {
        m.score.assign(static_cast<size_t>(cfg.n_heads), 0);
        m.norm_sum.assign(static_cast<size_t>(cfg.n_heads), 0.0);
    }
    for (auto& f : l.ffn) {
        f.score.assign(static_cast<size_t>(cfg.d_ffn), 0);
        f.norm_sum.assign(static_cast<size_t>(cfg.d_ffn), 0.0);
    }
    return l;
}

void ActivationLedger::reset() {
    samples_seen = 0;
    for (auto& m : mha) {
        std::fill(m.score.begin(), m.score.end(), 0);
        std::fill(m.norm_sum.begin(), m.norm_sum.end(), 0.0);
    }
    for (auto& f : ffn) {
        std::fill(f.score.begin(), f.score.end(), 0);
        std::fill(f.norm_sum.begin(), f.norm_sum.end(), 0.0);
    }
}

int component_count(int n_components, double k_proportion) {
    if (!(k_proportion > 0.0 && k_proportion <= 0.25))
        throw ConfigError("K proportion must lie in (0, 0.25]");
    if (n_components < 1) throw ConfigError("component count must be >= 1");
    const int k = static_cast<int>(std::floor(static_cast<double>(n_components) * k_proportion));
    return std::max(1, k);
}

namespace {

template <class V>
std::vector<int> ordered_indices(const std::vector<V>& values, int k, bool descending) {
    std::vector<int> idx(values.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (values[static_cast<size_t>(a)] != values[static_cast<size_t>(b)])
            return descending ? values[static_cast<size_t>(a)] > values[static_cast<size_t>(b)]
                              : values[static_cast<size_t>(a)] < values[static_cast<size_t>(b)];
        return a < b;  // tie: lower index wins
    });
    idx.resize(static_cast<size_t>(std::min<size_t>(idx.size(), static_cast<size_t>(k))));
    return idx;
}

// Top-k excluding members of `taken`, used to keep d^P and d^N disjoint
// when scores tie.
template <class V>
std::vector<int> ordered_indices_excluding(const std::vector<V>& values, int k, bool descending,
                                           const std::vector<int>& taken) {
    std::vector<char> skip(values.size(), 0);
    for (int t : taken) skip[static_cast<size_t>(t)] = 1;
    std::vector<int> idx;
    idx.reserve(values.size());
    for (size_t i = 0; i < values.size(); ++i)
        if (!skip[i]) idx.push_back(static_cast<int>(i));
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (values[static_cast<size_t>(a)] != values[static_cast<size_t>(b)])
            return descending ? values[static_cast<size_t>(a)] > values[static_cast<size_t>(b)]
                              : values[static_cast<size_t>(a)] < values[static_cast<size_t>(b)];
        return a < b;
    });
    idx.resize(static_cast<size_t>(std::min<size_t>(idx.size(), static_cast<size_t>(k))));
    return idx;
}

}  // namespace

std::vector<int> top_k_indices(const std::vector<double>& values, int k) {
    return ordered_indices(values, k, true);
}

std::vector<int> min_k_indices(const std::vector<double>& values, int k) {
    return ordered_indices(values, k, false);
}

void update_scores(ModuleLedger& ledger, const std::vector<float>& norms, double k_proportion) {
    if (norms.size() != ledger.score.size())
        throw ShapeError("norm vector length does not match ledger component count");
    const int n = static_cast<int>(norms.size());
    const int k = component_count(n, k_proportion);
    std::vector<double> vals(norms.begin(), norms.end());
    for (int i : ordered_indices(vals, k, true)) ledger.score[static_cast<size_t>(i)] += 1;
    for (int i : ordered_indices(vals, k, false)) ledger.score[static_cast<size_t>(i)] -= 1;
    for (int i = 0; i < n; ++i)
        ledger.norm_sum[static_cast<size_t>(i)] += static_cast<double>(norms[static_cast<size_t>(i)]);
}

void update_ledger(ActivationLedger& ledger, const ForwardTrace& trace, double k_mha,
                   double k_ffn) {
    if (trace.mha_head_norms.size() != ledger.mha.size() ||
        trace.ffn_channel_norms.size() != ledger.ffn.size())
        throw ShapeError("trace layer count does not match ledger");
    for (size_t li = 0; li < ledger.mha.size(); ++li)
        update_scores(ledger.mha[li], trace.mha_head_norms[li], k_mha);
    for (size_t li = 0; li < ledger.ffn.size(); ++li)
        update_scores(ledger.ffn[li], trace.ffn_channel_norms[li], k_ffn);
    ledger.samples_seen += 1;
}

namespace {

AdvantageSets::ModuleSets select_module(const ModuleLedger& ml, int64_t samples, int k,
                                        Strategy strategy, Rng& rng) {
    const int n = static_cast<int>(ml.score.size());
    AdvantageSets::ModuleSets out;
    switch (strategy) {
        case Strategy::Rank: {
            out.p = ordered_indices(ml.score, k, true);
            out.n = ordered_indices_excluding(ml.score, k, false, out.p);
            break;
        }
        case Strategy::Avg: {
            std::vector<double> means(ml.norm_sum.size());
            for (size_t i = 0; i < means.size(); ++i)
                means[i] = ml.norm_sum[i] / static_cast<double>(samples);
            out.p = ordered_indices(means, k, true);
            out.n = ordered_indices_excluding(means, k, false, out.p);
            break;
        }
        case Strategy::Random: {
            // partial Fisher-Yates: first 2k slots of a shuffled index array
            std::vector<int> idx(static_cast<size_t>(n));
            std::iota(idx.begin(), idx.end(), 0);
            for (int i = 0; i < 2 * k && i < n; ++i) {
                const int j = i + static_cast<int>(rng.below(static_cast<uint64_t>(n - i)));
                std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
            }
            out.p.assign(idx.begin(), idx.begin() + k);
            out.n.assign(idx.begin() + k, idx.begin() + 2 * k);
            break;
        }
    }
    std::sort(out.p.begin(), out.p.end());
    std::sort(out.n.begin(), out.n.end());
    return out;
}

}  // namespace

AdvantageSets select_sets(const ActivationLedger& ledger, double k_mha, double k_ffn,
                          Strategy strategy, uint64_t seed) {
    if (strategy != Strategy::Random && ledger.samples_seen == 0)
        throw StateError("selection from an empty ledger requires the random strategy");
    AdvantageSets sets;
    sets.k_mha = k_mha;
    sets.k_ffn = k_ffn;
    Rng rng(seed_stream(seed, 0x5e7));
    for (const auto& ml : ledger.mha) {
        const int k = component_count(static_cast<int>(ml.score.size()), k_mha);
        if (2 * k > static_cast<int>(ml.score.size()))
            throw ConfigError("P and N sets would overlap: 2k exceeds component count");
        sets.mha.push_back(select_module(ml, ledger.samples_seen, k, strategy, rng));
    }
    for (const auto& fl : ledger.ffn) {
        const int k = component_count(static_cast<int>(fl.score.size()), k_ffn);
        if (2 * k > static_cast<int>(fl.score.size()))
            throw ConfigError("P and N sets would overlap: 2k exceeds component count");
        sets.ffn.push_back(select_module(fl, ledger.samples_seen, k, strategy, rng));
    }
    return sets;
}

std::vector<StdReportRow> activation_std_report(const ActivationLedger& ledger) {
    if (ledger.samples_seen == 0) throw StateError("std report requires samples_seen > 0");
    std::vector<StdReportRow> rows;
    auto push = [&](int layer, ModuleKind kind, const ModuleLedger& ml) {
        const double inv = 1.0 / static_cast<double>(ledger.samples_seen);
        double mean = 0.0;
        for (double s : ml.norm_sum) mean += s * inv;
        mean /= static_cast<double>(ml.norm_sum.size());
        double ss = 0.0;
        for (double s : ml.norm_sum) {
            const double d = s * inv - mean;
            ss += d * d;
        }
        rows.push_back({layer, kind, mean, std::sqrt(ss / static_cast<double>(ml.norm_sum.size()))});
    };
    for (size_t li = 0; li < ledger.mha.size(); ++li)
        push(static_cast<int>(li), ModuleKind::Mha, ledger.mha[li]);
    for (size_t li = 0; li < ledger.ffn.size(); ++li)
        push(static_cast<int>(li), ModuleKind::Ffn, ledger.ffn[li]);
    return rows;
}

ModelParams mask_components(const ModelParams& params, int layer, ModuleKind kind,
                            const std::vector<int>& indices) {
    if (layer < 0 || layer >= static_cast<int>(params.layers.size()))
        throw IndexError("mask layer out of range");
    ModelParams out = params;
    auto& l = out.layers[static_cast<size_t>(layer)];
    if (kind == ModuleKind::Mha) {
        const int dh = params.cfg.d_head();
        for (int h : indices) {
            if (h < 0 || h >= params.cfg.n_heads) throw IndexError("mask head out of range");
            for (int64_t i = 0; i < l.wv.rows(); ++i)
                for (int64_t j = static_cast<int64_t>(h) * dh; j < static_cast<int64_t>(h + 1) * dh; ++j)
                    l.wv.at(i, j) = 0.0f;
            for (int64_t i = static_cast<int64_t>(h) * dh; i < static_cast<int64_t>(h + 1) * dh; ++i)
                for (int64_t j = 0; j < l.wo.cols(); ++j) l.wo.at(i, j) = 0.0f;
        }
    } else {
        for (int c : indices) {
            if (c < 0 || c >= params.cfg.d_ffn) throw IndexError("mask channel out of range");
            for (int64_t i = 0; i < l.wg.rows(); ++i) l.wg.at(i, c) = 0.0f;
        }
    }
    return out;
}

const char* module_kind_name(ModuleKind kind) { return kind == ModuleKind::Mha ? "mha" : "ffn"; }

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::Rank: return "rank";
        case Strategy::Avg: return "avg";
        case Strategy::Random: return "random";
    }
    return "?";
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "rank") return Strategy::Rank;
    if (name == "avg") return Strategy::Avg;
    if (name == "random") return Strategy::Random;
    throw ConfigError("unknown strategy '" + name + "' (expected rank|avg|random)");
}

void write_probe_stats(const ActivationLedger& ledger, std::ostream& os, bool csv) {
    if (ledger.samples_seen == 0) throw StateError("probe stats require samples_seen > 0");
    const double inv = 1.0 / static_cast<double>(ledger.samples_seen);
    if (csv) {
        os << "layer,module,component,mean_norm,score\n";
    } else {
        os << std::left << std::setw(6) << "layer" << std::setw(8) << "module" << std::setw(10)
           << "component" << std::setw(16) << "mean_norm" << "score\n";
    }
    auto emit = [&](int layer, const char* module, const ModuleLedger& ml) {
        for (size_t c = 0; c < ml.score.size(); ++c) {
            const double mean = ml.norm_sum[c] * inv;
            if (csv) {
                os << layer << ',' << module << ',' << c << ',' << std::setprecision(9) << mean
                   << ',' << ml.score[c] << '\n';
            } else {
                os << std::left << std::setw(6) << layer << std::setw(8) << module
                   << std::setw(10) << c << std::setw(16) << std::setprecision(6) << mean
                   << ml.score[c] << '\n';
            }
        }
    };
    for (size_t li = 0; li < ledger.mha.size(); ++li)
        emit(static_cast<int>(li), "mha", ledger.mha[li]);
    for (size_t li = 0; li < ledger.ffn.size(); ++li)
        emit(static_cast<int>(li), "ffn", ledger.ffn[li]);
}

}  // namespace apex
