#include "apex/staging.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <set>

namespace apex {

const char* train_mode_name(TrainMode m) { return m == TrainMode::Full ? "full" : "partial"; }

TrainMode train_mode_from_name(const std::string& name) {
    if (name == "full") return TrainMode::Full;
    if (name == "partial") return TrainMode::Partial;
    throw ConfigError("unknown mode '" + name + "' (expected full|partial)");
}

double StagePlan::lr_for_stage(int stage) const {
    if (!stage_lr.empty()) {
        const size_t i = std::min<size_t>(static_cast<size_t>(stage), stage_lr.size() - 1);
        return stage_lr[i];
    }
    // Decay pattern of the multi-stage schedule, relative to the stage-0 rate.
    static constexpr double kDecay[] = {1.0, 0.4, 0.1, 0.05, 0.01};
    const size_t i = std::min<size_t>(static_cast<size_t>(stage), std::size(kDecay) - 1);
    return base_lr * kDecay[i];
}

void StagePlan::validate() const {
    if (stages < 1) throw ConfigError("stage count must be >= 1");
    if (batch_size < 1 || seq_len < 1) throw ConfigError("batch/seq sizes must be >= 1");
    if (tokens_per_stage < static_cast<int64_t>(batch_size) * seq_len)
        throw ConfigError("tokens_per_stage must cover at least one batch");
    if (!no_expansion) {
        if (!(k_mha > 0.0 && k_mha <= 0.25) || !(k_ffn > 0.0 && k_ffn <= 0.25))
            throw ConfigError("K thresholds must lie in (0, 0.25]");
    }
    if (mode == TrainMode::Partial && no_expansion)
        throw ConfigError("partial mode requires expansion enabled");
    if (act_regu_lambda < 0.0) throw ConfigError("act_regu lambda must be >= 0");
    if (assess_samples < 1) throw ConfigError("assess_samples must be >= 1");
}

// ---- trainability ----

int64_t TensorMask::trainable_count(const Tensor& t) const {
    switch (kind) {
        case Kind::Full: return t.numel();
        case Kind::Frozen: return 0;
        case Kind::Cols: return static_cast<int64_t>(indices.size()) * t.rows();
        case Kind::Rows: return static_cast<int64_t>(indices.size()) * t.cols();
    }
    return 0;
}

bool TrainabilityMask::needs_grad(const std::string& name) const {
    const TensorMask* m = find(name);
    return !m || m->kind != TensorMask::Kind::Frozen;
}

const TensorMask* TrainabilityMask::find(const std::string& name) const {
    auto it = tensors.find(name);
    return it == tensors.end() ? nullptr : &it->second;
}

namespace {

std::vector<int> sorted_union(const std::vector<int>& a, const std::vector<int>& b) {
    std::set<int> s(a.begin(), a.end());
    s.insert(b.begin(), b.end());
    return std::vector<int>(s.begin(), s.end());
}

}  // namespace

TrainabilityMask build_trainability_mask(const ModelParams& params, const AdvantageSets* sets,
                                         TrainMode mode) {
    TrainabilityMask mask;
    mask.mode = mode;
    if (mode == TrainMode::Full) {
        for_each_param(params, [&](const std::string& name, const Tensor&) {
            mask.tensors[name] = TensorMask{TensorMask::Kind::Full, {}};
        });
        return mask;
    }
    if (!sets) throw ConfigError("partial mode requires advantage sets");
    const int dh = params.cfg.d_head();
    for_each_param(params, [&](const std::string& name, const Tensor&) {
        mask.tensors[name] = TensorMask{TensorMask::Kind::Frozen, {}};
    });
    for (size_t li = 0; li < params.layers.size(); ++li) {
        const std::string pre = "layers." + std::to_string(li) + ".";
        const auto head_span = sorted_union(head_flat_indices(sets->mha[li].p, dh),
                                            head_flat_indices(sets->mha[li].n, dh));
        const auto chan_span = sorted_union(sets->ffn[li].p, sets->ffn[li].n);
        mask.tensors[pre + "wv"] = TensorMask{TensorMask::Kind::Cols, head_span};
        mask.tensors[pre + "wo"] = TensorMask{TensorMask::Kind::Rows, head_span};
        mask.tensors[pre + "wu"] = TensorMask{TensorMask::Kind::Cols, chan_span};
        mask.tensors[pre + "wg"] = TensorMask{TensorMask::Kind::Cols, chan_span};
        mask.tensors[pre + "wd"] = TensorMask{TensorMask::Kind::Rows, chan_span};
    }
    return mask;
}

int64_t trainable_model_coords(const ModelParams& params, const TrainabilityMask& mask) {
    int64_t count = 0;
    for_each_param(params, [&](const std::string& name, const Tensor& t) {
        const TensorMask* m = mask.find(name);
        count += m ? m->trainable_count(t) : t.numel();
    });
    return count;
}

double trainable_fraction(const ModelParams& params, const TrainabilityMask& mask,
                          const OperatorBundle* ops) {
    const int64_t op_params = ops ? ops->param_count() : 0;
    const int64_t trainable = trainable_model_coords(params, mask) + op_params;
    const int64_t total = model_param_count(params.cfg) + op_params;
    return static_cast<double>(trainable) / static_cast<double>(total);
}

// ---- optimizer ----

void AdamW::step_begin() {
    ++t_;
    bc1_ = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    bc2_ = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
}

void AdamW::reset() {
    state_.clear();
    t_ = 0;
    bc1_ = bc2_ = 1.0;
}

void AdamW::update_coord(Moments& mo, Tensor& w, const Tensor& g, int64_t i) {
    const double gi = static_cast<double>(g[i]);
    const double m = cfg_.beta1 * static_cast<double>(mo.m[i]) + (1.0 - cfg_.beta1) * gi;
    const double v = cfg_.beta2 * static_cast<double>(mo.v[i]) + (1.0 - cfg_.beta2) * gi * gi;
    mo.m[i] = static_cast<float>(m);
    mo.v[i] = static_cast<float>(v);
    const double mhat = m / bc1_;
    const double vhat = v / bc2_;
    const double wd = cfg_.weight_decay * static_cast<double>(w[i]);
    w[i] = static_cast<float>(static_cast<double>(w[i]) -
                              cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd));
}

void AdamW::update(const std::string& name, Tensor& w, const Tensor& g, const TensorMask* mask) {
    if (t_ == 0) throw StateError("AdamW::step_begin must run before updates");
    if (!w.same_shape(g)) throw ShapeError("gradient shape mismatch for " + name);
    if (mask && mask->kind == TensorMask::Kind::Frozen) return;
    auto it = state_.find(name);
    if (it == state_.end()) {
        Moments mo;
        mo.m = Tensor::zeros(w.dims);
        mo.v = Tensor::zeros(w.dims);
        it = state_.emplace(name, std::move(mo)).first;
    }
    Moments& mo = it->second;
    if (!mask || mask->kind == TensorMask::Kind::Full) {
        for (int64_t i = 0; i < w.numel(); ++i) update_coord(mo, w, g, i);
    } else if (mask->kind == TensorMask::Kind::Cols) {
        const int64_t n = w.cols();
        for (int64_t r = 0; r < w.rows(); ++r)
            for (int c : mask->indices) update_coord(mo, w, g, r * n + c);
    } else {  // Rows
        const int64_t n = w.cols();
        for (int r : mask->indices)
            for (int64_t j = 0; j < n; ++j) update_coord(mo, w, g, static_cast<int64_t>(r) * n + j);
    }
}

// ---- activation regularization (value path) ----

double act_regu_penalty(const std::vector<ForwardTrace>& traces, double lambda) {
    if (lambda < 0.0) throw ConfigError("act_regu lambda must be >= 0");
    if (traces.empty()) throw DataError("act_regu penalty needs at least one sample");
    if (lambda == 0.0) return 0.0;
    const size_t n_layers = traces[0].mha_head_norms.size();
    const double inv_b = 1.0 / static_cast<double>(traces.size());
    double acc = 0.0;
    int modules = 0;
    auto std_of = [](const std::vector<double>& v) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        return std::sqrt(ss / static_cast<double>(v.size()));
    };
    for (size_t li = 0; li < n_layers; ++li) {
        std::vector<double> mha(traces[0].mha_head_norms[li].size(), 0.0);
        std::vector<double> ffn(traces[0].ffn_channel_norms[li].size(), 0.0);
        for (const auto& tr : traces) {
            for (size_t c = 0; c < mha.size(); ++c)
                mha[c] += static_cast<double>(tr.mha_head_norms[li][c]) * inv_b;
            for (size_t c = 0; c < ffn.size(); ++c)
                ffn[c] += static_cast<double>(tr.ffn_channel_norms[li][c]) * inv_b;
        }
        acc += std_of(mha);
        acc += std_of(ffn);
        modules += 2;
    }
    return lambda * acc / static_cast<double>(modules);
}

// ---- data plumbing ----

void write_metrics_csv(const std::vector<MetricsRow>& rows, std::ostream& os) {
    os << "stage,step,tokens,train_loss,eval_ppl,wall_ms\n";
    for (const auto& r : rows)
        os << r.stage << ',' << r.step << ',' << r.tokens << ',' << r.train_loss << ','
           << r.eval_ppl << ',' << r.wall_ms << '\n';
}

TrainData split_corpus(const Corpus& corpus, const StagePlan& plan) {
    const int64_t total = static_cast<int64_t>(corpus.tokens.size());
    const int64_t eval_n =
        std::min<int64_t>(plan.eval_tokens, std::max<int64_t>(plan.seq_len + 1, total / 8));
    if (total <= eval_n + plan.seq_len + 1) throw DataError("corpus too small to split");
    TrainData d;
    d.train.assign(corpus.tokens.begin(), corpus.tokens.end() - eval_n);
    d.eval.assign(corpus.tokens.end() - eval_n, corpus.tokens.end());
    return d;
}

double eval_loss(const ModelParams& params, const OperatorBundle* ops,
                 const std::vector<int>& stream, int seq_len) {
    if (static_cast<int>(stream.size()) <= seq_len) throw DataError("eval stream too short");
    const int64_t n_windows = (static_cast<int64_t>(stream.size()) - 1) / seq_len;
    double total = 0.0;
    for (int64_t w = 0; w < n_windows; ++w) {
        const int64_t off = w * seq_len;
        std::vector<int> inputs(stream.begin() + off, stream.begin() + off + seq_len);
        std::vector<int> targets(stream.begin() + off + 1, stream.begin() + off + seq_len + 1);
        Tape<float> tape;
        ModelBinding<float> binding = bind_params(tape, params);
        if (ops && !ops->empty()) apply_operators(tape, binding, *ops, /*allow_grad=*/false);
        const auto logits = forward_logits(tape, binding, params.cfg, inputs);
        total += static_cast<double>(cross_entropy_mean(tape.value(logits), targets));
    }
    return total / static_cast<double>(n_windows);
}

ActivationLedger pre_assess(const ModelParams& params, const std::vector<int>& subset,
                            const StagePlan& plan) {
    if (subset.empty()) throw DataError("pre-assessment subset is empty");
    if (static_cast<int>(subset.size()) <= plan.seq_len)
        throw DataError("pre-assessment subset shorter than one window");
    ActivationLedger ledger = ActivationLedger::make(params.cfg);
    const int64_t n_windows =
        std::min<int64_t>((static_cast<int64_t>(subset.size()) - 1) / plan.seq_len,
                          plan.assess_samples);
    for (int64_t w = 0; w < n_windows; ++w) {
        const int64_t off = w * plan.seq_len;
        std::vector<int> inputs(subset.begin() + off, subset.begin() + off + plan.seq_len);
        ForwardTrace trace;
        forward_logits_once(params, inputs, &trace);
        update_ledger(ledger, trace, plan.sample_k_mha(), plan.sample_k_ffn());
    }
    return ledger;
}

// ---- stage loop ----

StageResult run_stage(ModelParams& params, const StagePlan& plan, int stage_index,
                      const ActivationLedger& ledger_in, ActivationLedger& ledger_out,
                      const TrainData& data) {
    plan.validate();
    const ModelConfig& cfg = params.cfg;
    StageResult result;
    ledger_out = ActivationLedger::make(cfg);

    const bool expanding = !plan.no_expansion;
    OperatorBundle ops;
    if (expanding) {
        result.sets = select_sets(ledger_in, plan.k_mha, plan.k_ffn, plan.strategy,
                                  seed_stream(plan.seed, 0x100 + static_cast<uint64_t>(stage_index)));
        ops = attach_operators(params, result.sets,
                               seed_stream(plan.seed, 0x200 + static_cast<uint64_t>(stage_index)));
    }
    const TrainabilityMask mask =
        build_trainability_mask(params, expanding ? &result.sets : nullptr, plan.mode);
    result.trainable_frac = trainable_fraction(params, mask, expanding ? &ops : nullptr);

    AdamW opt({plan.lr_for_stage(stage_index), plan.beta1, plan.beta2, plan.adam_eps,
               plan.weight_decay});

    BatchIter iter(data.train, plan.seq_len, plan.batch_size,
                   seed_stream(plan.seed, 0x300 + static_cast<uint64_t>(stage_index)),
                   plan.shuffle);

    result.eval_ppl_start =
        std::exp(eval_loss(params, expanding ? &ops : nullptr, data.eval, plan.seq_len));

    const int64_t tokens_per_batch = iter.tokens_per_batch();
    const int64_t n_steps = plan.tokens_per_stage / tokens_per_batch;
    if (n_steps < 1) throw ConfigError("token budget below one batch");

    // Names for optimizer state, in for_each_param order.
    std::vector<std::string> param_names;
    for_each_param(params, [&](const std::string& n, const Tensor&) { param_names.push_back(n); });

    using Clock = std::chrono::steady_clock;
    double wall_ms = 0.0;

    for (int64_t step = 0; step < n_steps; ++step) {
        const BatchIter::Batch batch = iter.next();
        const auto t0 = Clock::now();

        Tape<float> tape;
        ModelBinding<float> binding =
            bind_params(tape, params, [&](const std::string& n) { return mask.needs_grad(n); });
        const std::vector<Tape<float>::Id> leaf_ids = binding_ids_in_param_order(binding);
        std::vector<OperatorNodeIds<float>> op_ids;
        if (expanding) op_ids = apply_operators(tape, binding, ops);

        std::vector<Tape<float>::Id> ce_ids;
        std::vector<ProbeNodes<float>> probes(batch.inputs.size());
        for (size_t b = 0; b < batch.inputs.size(); ++b) {
            const auto logits = forward_logits(tape, binding, cfg, batch.inputs[b], &probes[b]);
            ce_ids.push_back(tape.cross_entropy_mean(logits, batch.targets[b]));
        }
        Tape<float>::Id loss = tape.vec_mean(tape.pack_scalars(ce_ids));
        if (plan.act_regu_lambda > 0.0)
            loss = tape.add(loss, act_regu_penalty_node(tape, probes, plan.act_regu_lambda));

        for (const auto& probe : probes)
            update_ledger(ledger_out, extract_trace(tape, probe), plan.sample_k_mha(),
                          plan.sample_k_ffn());

        const double train_loss = static_cast<double>(tape.value(loss)[0]);
        if (step == 0) result.first_train_loss = train_loss;
        result.last_train_loss = train_loss;

        tape.backward(loss);
        opt.step_begin();
        size_t pi = 0;
        for_each_param(params, [&](const std::string& name, Tensor& t) {
            const TensorMask* m = mask.find(name);
            if (!m || m->kind != TensorMask::Kind::Frozen)
                opt.update(name, t, tape.grad(leaf_ids[pi]), m);
            ++pi;
        });
        if (expanding) {
            for (size_t oi = 0; oi < ops.ops.size(); ++oi) {
                auto& op = ops.ops[oi];
                if (!op.trainable) continue;
                const std::string base = op.name();
                if (op.m.exact) {
                    opt.update(base + ".Dfactor", op.m.dfactor, tape.grad(op_ids[oi].dfactor));
                    opt.update(base + ".Rfactor", op.m.rfactor, tape.grad(op_ids[oi].rfactor));
                } else {
                    opt.update(base + ".dense", op.m.dense, tape.grad(op_ids[oi].dense));
                }
            }
        }
        wall_ms += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();

        if ((step + 1) % plan.eval_interval == 0 || step + 1 == n_steps) {
            MetricsRow row;
            row.stage = stage_index;
            row.step = step + 1;
            row.tokens = (step + 1) * tokens_per_batch;
            row.train_loss = train_loss;
            row.eval_ppl =
                std::exp(eval_loss(params, expanding ? &ops : nullptr, data.eval, plan.seq_len));
            row.wall_ms = wall_ms;
            result.rows.push_back(row);
        }
    }

    result.eval_ppl_before_fuse =
        std::exp(eval_loss(params, expanding ? &ops : nullptr, data.eval, plan.seq_len));
    if (expanding) fuse_all(params, ops);
    result.eval_ppl_after_fuse = std::exp(eval_loss(params, nullptr, data.eval, plan.seq_len));
    result.steps = n_steps;
    result.tokens = n_steps * tokens_per_batch;
    result.train_wall_ms = wall_ms;
    return result;
}

TrainingResult run_training(ModelParams params, const StagePlan& plan, const TrainData& data) {
    plan.validate();
    TrainingResult out;
    ActivationLedger ledger = pre_assess(params, data.train, plan);
    for (int t = 0; t < plan.stages; ++t) {
        ActivationLedger next;
        StageResult sr = run_stage(params, plan, t, ledger, next, data);
        out.metrics.insert(out.metrics.end(), sr.rows.begin(), sr.rows.end());
        out.stages.push_back(std::move(sr));
        ledger = std::move(next);
    }
    out.final_eval_ppl = out.stages.back().eval_ppl_after_fuse;
    out.final_ledger = std::move(ledger);
    out.params = std::move(params);
    return out;
}

TrainingResult run_training(const ModelConfig& cfg, const StagePlan& plan, const Corpus& corpus) {
    cfg.validate();
    return run_training(init_params(cfg), plan, split_corpus(corpus, plan));
}

namespace {

int mask_count(int n, double fraction) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("mask fraction must be in (0,1)");
    return std::min(n, std::max(1, static_cast<int>(std::floor(n * fraction))));
}

std::vector<int> mask_pick(const std::vector<double>& means, int count, const std::string& which,
                           Rng& rng) {
    if (which == "top") return top_k_indices(means, count);
    if (which == "min") return min_k_indices(means, count);
    if (which == "random") {
        std::vector<int> idx(means.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        for (int i = 0; i < count; ++i) {
            const int j =
                i + static_cast<int>(rng.below(static_cast<uint64_t>(idx.size()) - i));
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        idx.resize(static_cast<size_t>(count));
        std::sort(idx.begin(), idx.end());
        return idx;
    }
    throw ConfigError("mask selector must be top|min|random, got '" + which + "'");
}

}  // namespace

MaskEvalResult mask_eval_run(const ModelParams& params, const std::vector<int>& assess_stream,
                             const std::vector<int>& eval_stream, int seq_len,
                             const std::string& which, double fraction, uint64_t seed,
                             int64_t assess_samples) {
    StagePlan probe_plan;
    probe_plan.seq_len = seq_len;
    probe_plan.assess_samples = assess_samples;
    const ActivationLedger ledger = pre_assess(params, assess_stream, probe_plan);

    Rng rng(seed_stream(seed, 0x3a5f));
    ModelParams masked = params;
    MaskEvalResult result;
    const double inv = 1.0 / static_cast<double>(ledger.samples_seen);
    for (size_t li = 0; li < masked.layers.size(); ++li) {
        std::vector<double> head_means(ledger.mha[li].norm_sum.size());
        for (size_t c = 0; c < head_means.size(); ++c)
            head_means[c] = ledger.mha[li].norm_sum[c] * inv;
        const auto heads =
            mask_pick(head_means, mask_count(static_cast<int>(head_means.size()), fraction),
                      which, rng);
        masked = mask_components(masked, static_cast<int>(li), ModuleKind::Mha, heads);
        result.masked_heads += static_cast<int>(heads.size());

        std::vector<double> chan_means(ledger.ffn[li].norm_sum.size());
        for (size_t c = 0; c < chan_means.size(); ++c)
            chan_means[c] = ledger.ffn[li].norm_sum[c] * inv;
        const auto chans =
            mask_pick(chan_means, mask_count(static_cast<int>(chan_means.size()), fraction),
                      which, rng);
        masked = mask_components(masked, static_cast<int>(li), ModuleKind::Ffn, chans);
        result.masked_channels += static_cast<int>(chans.size());
    }
    result.base_loss = eval_loss(params, nullptr, eval_stream, seq_len);
    result.masked_loss = eval_loss(masked, nullptr, eval_stream, seq_len);
    return result;
}

}  // namespace apex
