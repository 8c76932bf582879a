#include "apex/cli.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "apex/analysis.hpp"
#include "apex/checkpoint.hpp"
#include "apex/config_kv.hpp"
#include "apex/corpus.hpp"
#include "apex/staging.hpp"

namespace apex {

namespace {

struct CommonOpts {
    std::string config_path;
    std::string corpus_path;
    std::string checkpoint_path;
    std::string out_path;
    std::string csv_path;
    uint64_t seed = 0;
    bool seed_set = false;
};

void load_config_into(const std::string& path, ModelConfig& cfg, StagePlan& plan) {
    if (path.empty()) return;
    const auto kv = read_kv_file(path);
    apply_model_config(cfg, kv);
    apply_stage_plan(plan, kv);
}

// The config file provides defaults and explicit flags override them, so the
// file is applied before CLI11 parses the rest of argv.
std::string find_config_arg(int argc, const char* const* argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--config" && i + 1 < argc) return argv[i + 1];
        if (a.rfind("--config=", 0) == 0) return a.substr(9);
    }
    return "";
}

std::ofstream open_csv(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open csv output: " + path);
    return f;
}

int cmd_train(const CommonOpts& o, ModelConfig cfg, StagePlan plan) {
    const Corpus corpus = load_corpus_file(o.corpus_path);
    std::cout << "corpus: " << corpus.tokens.size() << " tokens (digest " << corpus.digest
              << ")\n";
    TrainingResult result = run_training(cfg, plan, corpus);

    std::cout << std::left << std::setw(7) << "stage" << std::setw(10) << "steps"
              << std::setw(14) << "train_loss" << std::setw(12) << "eval_ppl" << std::setw(12)
              << "trainable" << "wall_ms\n";
    for (size_t t = 0; t < result.stages.size(); ++t) {
        const auto& s = result.stages[t];
        std::cout << std::left << std::setw(7) << t << std::setw(10) << s.steps << std::setw(14)
                  << std::setprecision(6) << s.last_train_loss << std::setw(12)
                  << s.eval_ppl_after_fuse << std::setw(12) << s.trainable_frac
                  << static_cast<int64_t>(s.train_wall_ms) << "\n";
    }
    std::cout << "final eval ppl: " << result.final_eval_ppl << "\n";

    if (!o.csv_path.empty()) {
        auto f = open_csv(o.csv_path);
        write_metrics_csv(result.metrics, f);
        std::cout << "metrics csv: " << o.csv_path << "\n";
    }
    if (!o.out_path.empty()) {
        CheckpointState state;
        state.cfg = result.params.cfg;
        state.plan = plan;
        state.params = std::move(result.params);
        state.ledger = std::move(result.final_ledger);
        state.extra["corpus_digest"] = corpus.digest;
        state.extra["final_eval_ppl"] = format_double(result.final_eval_ppl);
        save_checkpoint(o.out_path, state);
        std::cout << "checkpoint: " << o.out_path << "\n";
    }
    return 0;
}

int cmd_assess(const CommonOpts& o, ModelConfig cfg, StagePlan plan) {
    const Corpus corpus = load_corpus_file(o.corpus_path);
    ModelParams params;
    if (!o.checkpoint_path.empty()) {
        CheckpointState state = load_checkpoint(o.checkpoint_path);
        params = std::move(state.params);
    } else {
        params = init_params(cfg);
    }
    const ActivationLedger ledger = pre_assess(params, corpus.tokens, plan);
    write_probe_stats(ledger, std::cout, false);
    if (!o.csv_path.empty()) {
        auto f = open_csv(o.csv_path);
        write_probe_stats(ledger, f, true);
    }
    return 0;
}

int cmd_eval(const CommonOpts& o, StagePlan plan_override, bool seq_len_set) {
    CheckpointState state = load_checkpoint(o.checkpoint_path);
    const Corpus corpus = load_corpus_file(o.corpus_path);
    const int seq_len = seq_len_set ? plan_override.seq_len : state.plan.seq_len;
    const OperatorBundle* ops = state.operators.empty() ? nullptr : &state.operators;
    const double loss = eval_loss(state.params, ops, corpus.tokens, seq_len);
    std::cout << "eval tokens: " << corpus.tokens.size() << "\n"
              << "eval loss (nats): " << loss << "\n"
              << "eval ppl: " << std::exp(loss)
              << (ops ? " (live operators applied)" : "") << "\n";
    return 0;
}

int cmd_fuse(const CommonOpts& o) {
    CheckpointState state = load_checkpoint(o.checkpoint_path);
    const size_t n_ops = state.operators.ops.size();
    fuse_all(state.params, state.operators);
    const std::string out = o.out_path.empty() ? o.checkpoint_path : o.out_path;
    save_checkpoint(out, state);
    std::cout << "fused " << n_ops << " operators into " << out << "\n";
    return 0;
}

int cmd_mask_eval(const CommonOpts& o, const std::string& which, double fraction) {
    CheckpointState state = load_checkpoint(o.checkpoint_path);
    if (!state.operators.empty()) fuse_all(state.params, state.operators);
    const Corpus corpus = load_corpus_file(o.corpus_path);
    const uint64_t seed = o.seed_set ? o.seed : state.plan.seed;
    const MaskEvalResult r =
        mask_eval_run(state.params, corpus.tokens, corpus.tokens, state.plan.seq_len, which,
                      fraction, seed, state.plan.assess_samples);
    std::cout << std::left << std::setw(10) << "which" << std::setw(10) << "fraction"
              << std::setw(14) << "base_loss" << std::setw(14) << "masked_loss"
              << std::setw(12) << "delta" << "masked(h/c)\n";
    std::cout << std::left << std::setw(10) << which << std::setw(10) << fraction
              << std::setw(14) << std::setprecision(6) << r.base_loss << std::setw(14)
              << r.masked_loss << std::setw(12) << (r.masked_loss - r.base_loss)
              << r.masked_heads << "/" << r.masked_channels << "\n";
    if (!o.csv_path.empty()) {
        auto f = open_csv(o.csv_path);
        f << "which,fraction,base_loss,masked_loss,delta,masked_heads,masked_channels\n"
          << which << ',' << fraction << ',' << r.base_loss << ',' << r.masked_loss << ','
          << (r.masked_loss - r.base_loss) << ',' << r.masked_heads << ','
          << r.masked_channels << '\n';
    }
    return 0;
}

int cmd_rank_report(const std::vector<std::string>& checkpoints, const std::string& matrices,
                    double eps_rel, const std::string& csv_path) {
    std::vector<TargetMatrix> which;
    std::istringstream ss(matrices);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) which.push_back(target_matrix_from_name(item));
    if (which.empty()) throw ConfigError("no matrices selected");

    std::vector<CheckpointState> states;
    states.reserve(checkpoints.size());
    std::vector<std::pair<std::string, const ModelParams*>> labeled;
    for (const auto& path : checkpoints) states.push_back(load_checkpoint(path));
    for (size_t i = 0; i < states.size(); ++i) labeled.emplace_back(checkpoints[i], &states[i].params);

    const auto rows = rank_report(labeled, which, eps_rel);
    std::cout << std::left << std::setw(28) << "checkpoint" << std::setw(7) << "layer"
              << std::setw(8) << "matrix" << std::setw(14) << "sigma_max" << std::setw(10)
              << "eff_rank" << "eps_rel\n";
    for (const auto& r : rows)
        std::cout << std::left << std::setw(28) << r.checkpoint << std::setw(7) << r.layer
                  << std::setw(8) << r.matrix << std::setw(14) << std::setprecision(6)
                  << r.sigma_max << std::setw(10) << r.eff_rank << r.eps_rel << "\n";
    if (!csv_path.empty()) {
        auto f = open_csv(csv_path);
        write_rank_report_csv(rows, f);
    }
    return 0;
}

int cmd_probe_stats(const CommonOpts& o) {
    CheckpointState state = load_checkpoint(o.checkpoint_path);
    write_probe_stats(state.ledger, std::cout, false);
    if (!o.csv_path.empty()) {
        auto f = open_csv(o.csv_path);
        write_probe_stats(state.ledger, f, true);
    }
    return 0;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv) {
    CLI::App app{"apex: advantageous-parameter expansion training on a toy GLU transformer"};
    app.require_subcommand(1);

    CommonOpts o;
    ModelConfig cfg;
    StagePlan plan;
    try {
        load_config_into(find_config_arg(argc, argv), cfg, plan);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    // train
    auto* train = app.add_subcommand("train", "run the staged training pipeline");
    train->add_option("--corpus", o.corpus_path, "input text/bytes file")->required();
    train->add_option("--config", o.config_path, "key=value config file");
    train->add_option("--out", o.out_path, "checkpoint output path");
    train->add_option("--csv", o.csv_path, "metrics csv path");
    train->add_option("--stages", plan.stages, "stage count T");
    train->add_option("--tokens-per-stage", plan.tokens_per_stage, "token budget per stage");
    train->add_option("--k-mha", plan.k_mha, "head threshold in (0, 0.25]");
    train->add_option("--k-ffn", plan.k_ffn, "channel threshold in (0, 0.25]");
    std::string mode_str, strategy_str;
    train->add_option("--mode", mode_str, "full|partial");
    train->add_option("--strategy", strategy_str, "rank|avg|random");
    train->add_option("--act-regu", plan.act_regu_lambda, "activation std penalty weight");
    train->add_flag("--no-expansion", plan.no_expansion, "vanilla baseline (no operators)");
    auto* train_seed = train->add_option("--seed", o.seed, "run seed");
    train->add_option("--batch", plan.batch_size, "sequences per step");
    train->add_option("--seq-len", plan.seq_len, "window length");
    train->add_option("--lr", plan.base_lr, "stage-0 learning rate");
    train->add_option("--d-model", cfg.d_model, "model width");
    train->add_option("--layers", cfg.n_layers, "layer count");
    train->add_option("--heads", cfg.n_heads, "attention heads");
    train->add_option("--d-ffn", cfg.d_ffn, "ffn width");

    // assess
    auto* assess = app.add_subcommand("assess", "pre-assessment activation report");
    assess->add_option("--corpus", o.corpus_path)->required();
    assess->add_option("--config", o.config_path);
    assess->add_option("--checkpoint", o.checkpoint_path, "assess this checkpoint");
    assess->add_option("--csv", o.csv_path);
    assess->add_option("--samples", plan.assess_samples, "assessment sample count");
    auto* assess_seed = assess->add_option("--seed", o.seed);

    // eval
    auto* eval = app.add_subcommand("eval", "perplexity of a checkpoint on a corpus");
    eval->add_option("--checkpoint", o.checkpoint_path)->required();
    eval->add_option("--corpus", o.corpus_path)->required();
    auto* eval_seq = eval->add_option("--seq-len", plan.seq_len, "window length override");

    // fuse
    auto* fuse = app.add_subcommand("fuse", "fuse live operators into the weights");
    fuse->add_option("--checkpoint", o.checkpoint_path)->required();
    fuse->add_option("--out", o.out_path, "output path (default: in place)");

    // mask-eval
    auto* mask = app.add_subcommand("mask-eval", "masking experiment on a checkpoint");
    mask->add_option("--checkpoint", o.checkpoint_path)->required();
    mask->add_option("--corpus", o.corpus_path)->required();
    std::string which = "top";
    double fraction = 0.1;
    mask->add_option("--which", which, "top|min|random");
    mask->add_option("--fraction", fraction, "fraction of components to mask");
    auto* mask_seed = mask->add_option("--seed", o.seed);
    mask->add_option("--csv", o.csv_path);

    // rank-report
    auto* rank = app.add_subcommand("rank-report", "effective-rank report for checkpoints");
    std::vector<std::string> rank_ckpts;
    std::string matrices = "V,O,U,G,D";
    double eps_rel = 0.01;
    rank->add_option("--checkpoint", rank_ckpts, "checkpoint path (repeatable)")->required();
    rank->add_option("--matrices", matrices, "comma list of V,O,U,G,D");
    rank->add_option("--eps-rel", eps_rel, "relative singular value threshold");
    rank->add_option("--csv", o.csv_path);

    // probe-stats
    auto* probe = app.add_subcommand("probe-stats", "stored ledger statistics of a checkpoint");
    probe->add_option("--checkpoint", o.checkpoint_path)->required();
    probe->add_option("--csv", o.csv_path);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*train) {
            if (!mode_str.empty()) plan.mode = train_mode_from_name(mode_str);
            if (!strategy_str.empty()) plan.strategy = strategy_from_name(strategy_str);
            if (!train_seed->empty()) {
                plan.seed = o.seed;
                cfg.seed = o.seed;
            }
            return cmd_train(o, cfg, plan);
        }
        if (*assess) {
            if (!assess_seed->empty()) cfg.seed = o.seed;
            return cmd_assess(o, cfg, plan);
        }
        if (*eval) return cmd_eval(o, plan, !eval_seq->empty());
        if (*fuse) return cmd_fuse(o);
        if (*mask) {
            o.seed_set = !mask_seed->empty();
            return cmd_mask_eval(o, which, fraction);
        }
        if (*rank) return cmd_rank_report(rank_ckpts, matrices, eps_rel, o.csv_path);
        if (*probe) return cmd_probe_stats(o);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace apex
