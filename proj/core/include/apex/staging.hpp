#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "apex/assessment.hpp"
#include "apex/corpus.hpp"
#include "apex/expansion.hpp"
#include "apex/model.hpp"

namespace apex {

enum class TrainMode { Full, Partial };

const char* train_mode_name(TrainMode m);
TrainMode train_mode_from_name(const std::string& name);

struct StagePlan {
    int stages = 1;
    int64_t tokens_per_stage = 1 << 16;
    double k_mha = 0.1875;
    double k_ffn = 0.1875;
    // Per-sample Top-k/Min-k proportions; <= 0 inherits k_mha / k_ffn.
    double k_sample_mha = 0.0;
    double k_sample_ffn = 0.0;
    TrainMode mode = TrainMode::Full;
    Strategy strategy = Strategy::Rank;
    bool no_expansion = false;
    double act_regu_lambda = 0.0;
    int batch_size = 16;
    int seq_len = 64;
    uint64_t seed = 0;
    double base_lr = 1.5e-3;
    std::vector<double> stage_lr;  // explicit per-stage rates; empty = decayed base_lr
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    int64_t eval_tokens = 8192;
    int eval_interval = 100;  // steps between metrics rows
    int64_t assess_samples = 64;
    bool shuffle = true;

    double sample_k_mha() const { return k_sample_mha > 0 ? k_sample_mha : k_mha; }
    double sample_k_ffn() const { return k_sample_ffn > 0 ? k_sample_ffn : k_ffn; }
    // K = 0 is the no-expansion operating point.
    bool expansion_enabled() const { return !no_expansion && k_mha > 0.0 && k_ffn > 0.0; }
    double lr_for_stage(int stage) const;
    void validate() const;
};

// Per-tensor trainability. Cols/Rows restrict updates to an index set along
// that dimension; everything outside stays bit-identical across steps.
struct TensorMask {
    enum class Kind { Full, Frozen, Cols, Rows };
    Kind kind = Kind::Full;
    std::vector<int> indices;

    int64_t trainable_count(const Tensor& t) const;
};

struct TrainabilityMask {
    TrainMode mode = TrainMode::Full;
    std::map<std::string, TensorMask> tensors;

    bool needs_grad(const std::string& name) const;
    const TensorMask* find(const std::string& name) const;
};

// Full mode: everything trainable. Partial: only the P/N slices of the five
// expanded matrices (plus operators, tracked separately) are trainable.
TrainabilityMask build_trainability_mask(const ModelParams& params, const AdvantageSets* sets,
                                         TrainMode mode);

int64_t trainable_model_coords(const ModelParams& params, const TrainabilityMask& mask);

// Trainable fraction over model plus live-operator coordinates.
double trainable_fraction(const ModelParams& params, const TrainabilityMask& mask,
                          const OperatorBundle* ops);

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam over named tensors. Coordinates excluded by a
// mask are never read or written.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

    void step_begin();
    void update(const std::string& name, Tensor& w, const Tensor& g,
                const TensorMask* mask = nullptr);
    void reset();
    int64_t step_count() const { return t_; }

private:
    struct Moments {
        Tensor m, v;
    };
    void update_coord(Moments& mo, Tensor& w, const Tensor& g, int64_t i);

    AdamWConfig cfg_;
    std::map<std::string, Moments> state_;
    int64_t t_ = 0;
    double bc1_ = 1.0, bc2_ = 1.0;
};

// ---- activation regularization ----

// lambda * mean over (layer, module) of the population std across components
// of the batch-mean per-sample norms. Differentiable on the tape.
template <class T>
typename Tape<T>::Id act_regu_penalty_node(Tape<T>& tape,
                                           const std::vector<ProbeNodes<T>>& batch_probes,
                                           double lambda) {
    using Id = typename Tape<T>::Id;
    if (lambda < 0.0) throw ConfigError("act_regu lambda must be >= 0");
    if (batch_probes.empty()) throw DataError("act_regu penalty needs at least one sample");
    const T inv_b = T(1) / static_cast<T>(batch_probes.size());
    const size_t n_layers = batch_probes[0].mha_head_norms.size();
    std::vector<Id> module_stds;
    for (size_t li = 0; li < n_layers; ++li) {
        Id mha_sum = -1;
        for (const auto& probe : batch_probes) {
            const Id vec = tape.pack_scalars(probe.mha_head_norms[li]);
            mha_sum = mha_sum < 0 ? vec : tape.add(mha_sum, vec);
        }
        module_stds.push_back(tape.vec_std_pop(tape.scale(mha_sum, inv_b)));
        Id ffn_sum = -1;
        for (const auto& probe : batch_probes) {
            const Id vec = probe.ffn_channel_norms[li];
            ffn_sum = ffn_sum < 0 ? vec : tape.add(ffn_sum, vec);
        }
        module_stds.push_back(tape.vec_std_pop(tape.scale(ffn_sum, inv_b)));
    }
    return tape.scale(tape.vec_mean(tape.pack_scalars(module_stds)), static_cast<T>(lambda));
}

// Value-level counterpart on recorded traces (the oracle-facing path).
double act_regu_penalty(const std::vector<ForwardTrace>& traces, double lambda);

// ---- training loop ----

struct MetricsRow {
    int stage = 0;
    int64_t step = 0;
    int64_t tokens = 0;
    double train_loss = 0.0;
    double eval_ppl = 0.0;
    double wall_ms = 0.0;
};

void write_metrics_csv(const std::vector<MetricsRow>& rows, std::ostream& os);

struct TrainData {
    std::vector<int> train;
    std::vector<int> eval;
};

TrainData split_corpus(const Corpus& corpus, const StagePlan& plan);

// Mean next-token cross entropy over stride-L windows, with operators live
// when `ops` is non-null.
double eval_loss(const ModelParams& params, const OperatorBundle* ops,
                 const std::vector<int>& stream, int seq_len);

// Probe-only forward passes; scores populated, parameters untouched.
ActivationLedger pre_assess(const ModelParams& params, const std::vector<int>& subset,
                            const StagePlan& plan);

struct StageResult {
    std::vector<MetricsRow> rows;
    AdvantageSets sets;              // selected sets (empty when not expanding)
    double eval_ppl_start = 0.0;     // right after attach (zero-init operators)
    double eval_ppl_before_fuse = 0.0;
    double eval_ppl_after_fuse = 0.0;
    double first_train_loss = 0.0;
    double last_train_loss = 0.0;
    double train_wall_ms = 0.0;      // forward+backward+update time only
    int64_t steps = 0;
    int64_t tokens = 0;
    double trainable_frac = 1.0;
};

// One assess -> expand -> train -> fuse cycle. `ledger_in` drives set
// selection; `ledger_out` collects this stage's activations for the next.
StageResult run_stage(ModelParams& params, const StagePlan& plan, int stage_index,
                      const ActivationLedger& ledger_in, ActivationLedger& ledger_out,
                      const TrainData& data);

struct TrainingResult {
    ModelParams params;
    std::vector<MetricsRow> metrics;
    std::vector<StageResult> stages;
    ActivationLedger final_ledger;
    double final_eval_ppl = 0.0;
};

// Masking experiment: rank components by mean activation on the assess
// stream, zero the chosen fraction (top | min | random) in every layer and
// module, and compare eval loss against the unmasked model.
struct MaskEvalResult {
    double base_loss = 0.0;
    double masked_loss = 0.0;
    int masked_heads = 0;
    int masked_channels = 0;
};

MaskEvalResult mask_eval_run(const ModelParams& params, const std::vector<int>& assess_stream,
                             const std::vector<int>& eval_stream, int seq_len,
                             const std::string& which, double fraction, uint64_t seed,
                             int64_t assess_samples);

// Pre-assessment followed by `stages` sequential stages, each seeded from
// the previous stage's parameters and ledger.
TrainingResult run_training(ModelParams params, const StagePlan& plan, const TrainData& data);
TrainingResult run_training(const ModelConfig& cfg, const StagePlan& plan, const Corpus& corpus);

}  // namespace apex
