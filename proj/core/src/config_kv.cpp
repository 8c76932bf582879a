#include "apex/config_kv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "apex/errors.hpp"

namespace apex {

std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        size_t a = line.find_first_not_of(" \t\r");
        if (a == std::string::npos) continue;
        size_t b = line.find_last_not_of(" \t\r");
        line = line.substr(a, b - a + 1);
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("config line " + std::to_string(lineno) + " has no '='");
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        size_t v = val.find_first_not_of(" \t");
        val = v == std::string::npos ? "" : val.substr(v);
        kv[key] = val;
    }
    return kv;
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_kv(ss.str());
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

namespace {

int to_int(const std::string& s, const std::string& key) {
    try {
        return std::stoi(s);
    } catch (...) {
        throw ConfigError("bad integer for " + key + ": '" + s + "'");
    }
}

int64_t to_i64(const std::string& s, const std::string& key) {
    try {
        return std::stoll(s);
    } catch (...) {
        throw ConfigError("bad integer for " + key + ": '" + s + "'");
    }
}

uint64_t to_u64(const std::string& s, const std::string& key) {
    try {
        return std::stoull(s);
    } catch (...) {
        throw ConfigError("bad integer for " + key + ": '" + s + "'");
    }
}

double to_double(const std::string& s, const std::string& key) {
    try {
        return std::stod(s);
    } catch (...) {
        throw ConfigError("bad number for " + key + ": '" + s + "'");
    }
}

bool to_bool(const std::string& s, const std::string& key) {
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    throw ConfigError("bad flag for " + key + ": '" + s + "'");
}

}  // namespace

void apply_model_config(ModelConfig& cfg, const std::map<std::string, std::string>& kv) {
    for (const auto& [key, val] : kv) {
        if (key.rfind("model.", 0) != 0) continue;
        const std::string f = key.substr(6);
        if (f == "n_layers") cfg.n_layers = to_int(val, key);
        else if (f == "d_model") cfg.d_model = to_int(val, key);
        else if (f == "n_heads") cfg.n_heads = to_int(val, key);
        else if (f == "d_ffn") cfg.d_ffn = to_int(val, key);
        else if (f == "vocab_size") cfg.vocab_size = to_int(val, key);
        else if (f == "max_seq_len") cfg.max_seq_len = to_int(val, key);
        else if (f == "seed") cfg.seed = to_u64(val, key);
        else if (f == "rms_eps") cfg.rms_eps = static_cast<float>(to_double(val, key));
        else if (f == "activation") {
            if (val == "silu") cfg.activation = Activation::Silu;
            else if (val == "gelu") cfg.activation = Activation::Gelu;
            else throw ConfigError("unknown activation '" + val + "'");
        } else {
            throw ConfigError("unknown model config key: " + key);
        }
    }
}

void apply_stage_plan(StagePlan& plan, const std::map<std::string, std::string>& kv) {
    for (const auto& [key, val] : kv) {
        if (key.rfind("plan.", 0) != 0) continue;
        const std::string f = key.substr(5);
        if (f == "stages") plan.stages = to_int(val, key);
        else if (f == "tokens_per_stage") plan.tokens_per_stage = to_i64(val, key);
        else if (f == "k_mha") plan.k_mha = to_double(val, key);
        else if (f == "k_ffn") plan.k_ffn = to_double(val, key);
        else if (f == "k_sample_mha") plan.k_sample_mha = to_double(val, key);
        else if (f == "k_sample_ffn") plan.k_sample_ffn = to_double(val, key);
        else if (f == "mode") plan.mode = train_mode_from_name(val);
        else if (f == "strategy") plan.strategy = strategy_from_name(val);
        else if (f == "no_expansion") plan.no_expansion = to_bool(val, key);
        else if (f == "act_regu_lambda") plan.act_regu_lambda = to_double(val, key);
        else if (f == "batch_size") plan.batch_size = to_int(val, key);
        else if (f == "seq_len") plan.seq_len = to_int(val, key);
        else if (f == "seed") plan.seed = to_u64(val, key);
        else if (f == "base_lr") plan.base_lr = to_double(val, key);
        else if (f == "beta1") plan.beta1 = to_double(val, key);
        else if (f == "beta2") plan.beta2 = to_double(val, key);
        else if (f == "adam_eps") plan.adam_eps = to_double(val, key);
        else if (f == "weight_decay") plan.weight_decay = to_double(val, key);
        else if (f == "eval_tokens") plan.eval_tokens = to_i64(val, key);
        else if (f == "eval_interval") plan.eval_interval = to_int(val, key);
        else if (f == "assess_samples") plan.assess_samples = to_i64(val, key);
        else if (f == "shuffle") plan.shuffle = to_bool(val, key);
        else if (f == "stage_lr") {
            plan.stage_lr.clear();
            std::istringstream ss(val);
            std::string item;
            while (std::getline(ss, item, ','))
                if (!item.empty()) plan.stage_lr.push_back(to_double(item, key));
        } else {
            throw ConfigError("unknown plan config key: " + key);
        }
    }
}

std::string serialize_model_config(const ModelConfig& cfg) {
    std::ostringstream os;
    os << "model.n_layers=" << cfg.n_layers << '\n'
       << "model.d_model=" << cfg.d_model << '\n'
       << "model.n_heads=" << cfg.n_heads << '\n'
       << "model.d_ffn=" << cfg.d_ffn << '\n'
       << "model.vocab_size=" << cfg.vocab_size << '\n'
       << "model.max_seq_len=" << cfg.max_seq_len << '\n'
       << "model.seed=" << cfg.seed << '\n'
       << "model.activation=" << (cfg.activation == Activation::Silu ? "silu" : "gelu") << '\n'
       << "model.rms_eps=" << format_double(static_cast<double>(cfg.rms_eps)) << '\n';
    return os.str();
}

std::string serialize_stage_plan(const StagePlan& plan) {
    std::ostringstream os;
    os << "plan.stages=" << plan.stages << '\n'
       << "plan.tokens_per_stage=" << plan.tokens_per_stage << '\n'
       << "plan.k_mha=" << format_double(plan.k_mha) << '\n'
       << "plan.k_ffn=" << format_double(plan.k_ffn) << '\n'
       << "plan.k_sample_mha=" << format_double(plan.k_sample_mha) << '\n'
       << "plan.k_sample_ffn=" << format_double(plan.k_sample_ffn) << '\n'
       << "plan.mode=" << train_mode_name(plan.mode) << '\n'
       << "plan.strategy=" << strategy_name(plan.strategy) << '\n'
       << "plan.no_expansion=" << (plan.no_expansion ? 1 : 0) << '\n'
       << "plan.act_regu_lambda=" << format_double(plan.act_regu_lambda) << '\n'
       << "plan.batch_size=" << plan.batch_size << '\n'
       << "plan.seq_len=" << plan.seq_len << '\n'
       << "plan.seed=" << plan.seed << '\n'
       << "plan.base_lr=" << format_double(plan.base_lr) << '\n';
    os << "plan.stage_lr=";
    for (size_t i = 0; i < plan.stage_lr.size(); ++i)
        os << (i ? "," : "") << format_double(plan.stage_lr[i]);
    os << '\n';
    os << "plan.beta1=" << format_double(plan.beta1) << '\n'
       << "plan.beta2=" << format_double(plan.beta2) << '\n'
       << "plan.adam_eps=" << format_double(plan.adam_eps) << '\n'
       << "plan.weight_decay=" << format_double(plan.weight_decay) << '\n'
       << "plan.eval_tokens=" << plan.eval_tokens << '\n'
       << "plan.eval_interval=" << plan.eval_interval << '\n'
       << "plan.assess_samples=" << plan.assess_samples << '\n'
       << "plan.shuffle=" << (plan.shuffle ? 1 : 0) << '\n';
    return os.str();
}

}  // namespace apex
