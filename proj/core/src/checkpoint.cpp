#include "apex/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "apex/config_kv.hpp"
#include "apex/errors.hpp"

namespace apex {

namespace {

constexpr uint8_t kDtypeF32 = 0;
constexpr uint8_t kDtypeF64 = 1;
constexpr uint8_t kDtypeI64 = 2;

size_t dtype_size(uint8_t dt) {
    switch (dt) {
        case kDtypeF32: return 4;
        case kDtypeF64: return 8;
        case kDtypeI64: return 8;
    }
    throw FormatError("unknown dtype code " + std::to_string(dt));
}

struct RawRecord {
    uint8_t dtype = kDtypeF32;
    std::vector<int64_t> dims;
    std::vector<char> bytes;

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }
};

class Writer {
public:
    void put_u32(uint32_t v) { put_raw(&v, sizeof(v)); }
    void put_u64(uint64_t v) { put_raw(&v, sizeof(v)); }
    void put_u8(uint8_t v) { put_raw(&v, sizeof(v)); }
    void put_bytes(const void* p, size_t n) { put_raw(p, n); }
    void put_string(const std::string& s) {
        put_u32(static_cast<uint32_t>(s.size()));
        put_raw(s.data(), s.size());
    }
    const std::string& buffer() const { return buf_; }

private:
    void put_raw(const void* p, size_t n) { buf_.append(static_cast<const char*>(p), n); }
    std::string buf_;
};

class Reader {
public:
    Reader(std::string data, std::string context)
        : data_(std::move(data)), context_(std::move(context)) {}

    uint32_t get_u32() { return get_pod<uint32_t>(); }
    uint64_t get_u64() { return get_pod<uint64_t>(); }
    uint8_t get_u8() { return get_pod<uint8_t>(); }
    std::string get_string() {
        const uint32_t n = get_u32();
        need(n);
        std::string s(data_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    void get_bytes(void* out, size_t n) {
        need(n);
        std::memcpy(out, data_.data() + pos_, n);
        pos_ += n;
    }
    bool at_end() const { return pos_ == data_.size(); }
    void set_context(std::string c) { context_ = std::move(c); }

private:
    template <class T>
    T get_pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(size_t n) {
        if (pos_ + n > data_.size())
            throw FormatError("truncated checkpoint while reading " + context_);
    }
    std::string data_;
    std::string context_;
    size_t pos_ = 0;
};

void write_record(Writer& w, const std::string& name, uint8_t dtype,
                  const std::vector<int64_t>& dims, const void* data, size_t bytes) {
    w.put_string(name);
    w.put_u8(dtype);
    w.put_u32(static_cast<uint32_t>(dims.size()));
    for (int64_t d : dims) w.put_u64(static_cast<uint64_t>(d));
    w.put_bytes(data, bytes);
}

void add_f32(std::vector<std::pair<std::string, RawRecord>>& recs, const std::string& name,
             const Tensor& t) {
    RawRecord r;
    r.dtype = kDtypeF32;
    r.dims = t.dims;
    r.bytes.resize(t.data.size() * sizeof(float));
    std::memcpy(r.bytes.data(), t.data.data(), r.bytes.size());
    recs.emplace_back(name, std::move(r));
}

void add_f64(std::vector<std::pair<std::string, RawRecord>>& recs, const std::string& name,
             const std::vector<double>& v) {
    RawRecord r;
    r.dtype = kDtypeF64;
    r.dims = {static_cast<int64_t>(v.size())};
    r.bytes.resize(v.size() * sizeof(double));
    std::memcpy(r.bytes.data(), v.data(), r.bytes.size());
    recs.emplace_back(name, std::move(r));
}

void add_i64(std::vector<std::pair<std::string, RawRecord>>& recs, const std::string& name,
             const std::vector<int64_t>& v) {
    RawRecord r;
    r.dtype = kDtypeI64;
    r.dims = {static_cast<int64_t>(v.size())};
    r.bytes.resize(v.size() * sizeof(int64_t));
    std::memcpy(r.bytes.data(), v.data(), r.bytes.size());
    recs.emplace_back(name, std::move(r));
}

class RecordMap {
public:
    explicit RecordMap(std::map<std::string, RawRecord> m) : map_(std::move(m)) {}

    const RawRecord& fetch(const std::string& name, uint8_t dtype) const {
        auto it = map_.find(name);
        if (it == map_.end()) throw FormatError("missing tensor record '" + name + "'");
        if (it->second.dtype != dtype)
            throw FormatError("dtype mismatch for record '" + name + "'");
        return it->second;
    }

    Tensor fetch_f32(const std::string& name) const {
        const RawRecord& r = fetch(name, kDtypeF32);
        Tensor t(r.dims);
        std::memcpy(t.data.data(), r.bytes.data(), r.bytes.size());
        return t;
    }

    std::vector<double> fetch_f64(const std::string& name) const {
        const RawRecord& r = fetch(name, kDtypeF64);
        std::vector<double> v(static_cast<size_t>(r.numel()));
        std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
        return v;
    }

    std::vector<int64_t> fetch_i64(const std::string& name) const {
        const RawRecord& r = fetch(name, kDtypeI64);
        std::vector<int64_t> v(static_cast<size_t>(r.numel()));
        std::memcpy(v.data(), r.bytes.data(), r.bytes.size());
        return v;
    }

private:
    std::map<std::string, RawRecord> map_;
};

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointState& state) {
    // Config blob: model + plan + operator/ledger metadata + extras.
    std::ostringstream blob;
    blob << serialize_model_config(state.cfg);
    blob << serialize_stage_plan(state.plan);
    blob << "op.count=" << state.operators.ops.size() << '\n';
    for (size_t i = 0; i < state.operators.ops.size(); ++i) {
        const auto& op = state.operators.ops[i];
        const std::string pre = "op." + std::to_string(i) + ".";
        blob << pre << "layer=" << op.layer << '\n'
             << pre << "target=" << target_matrix_name(op.target) << '\n'
             << pre << "orient=" << (op.orient == Orientation::Column ? "col" : "row") << '\n'
             << pre << "n=" << op.m.n << '\n'
             << pre << "exact=" << (op.m.exact ? 1 : 0) << '\n'
             << pre << "trainable=" << (op.trainable ? 1 : 0) << '\n'
             << pre << "fused=" << (op.fused ? 1 : 0) << '\n';
    }
    blob << "ledger.samples_seen=" << state.ledger.samples_seen << '\n';
    for (const auto& [k, v] : state.extra) blob << "extra." << k << '=' << v << '\n';

    std::vector<std::pair<std::string, RawRecord>> recs;
    for_each_param(state.params, [&](const std::string& name, const Tensor& t) {
        add_f32(recs, name, t);
    });
    for (const auto& op : state.operators.ops) {
        const std::string base = op.name();
        if (op.m.exact) {
            add_f32(recs, base + ".Dfactor", op.m.dfactor);
            add_f32(recs, base + ".Rfactor", op.m.rfactor);
        } else {
            add_f32(recs, base + ".dense", op.m.dense);
        }
        add_i64(recs, base + ".pidx",
                std::vector<int64_t>(op.p_idx.begin(), op.p_idx.end()));
        add_i64(recs, base + ".nidx",
                std::vector<int64_t>(op.n_idx.begin(), op.n_idx.end()));
    }
    for (size_t li = 0; li < state.ledger.mha.size(); ++li) {
        const std::string pre = "ledger.mha." + std::to_string(li);
        add_i64(recs, pre + ".score", state.ledger.mha[li].score);
        add_f64(recs, pre + ".sum", state.ledger.mha[li].norm_sum);
    }
    for (size_t li = 0; li < state.ledger.ffn.size(); ++li) {
        const std::string pre = "ledger.ffn." + std::to_string(li);
        add_i64(recs, pre + ".score", state.ledger.ffn[li].score);
        add_f64(recs, pre + ".sum", state.ledger.ffn[li].norm_sum);
    }

    Writer w;
    w.put_bytes("APEX", 4);
    w.put_u32(kCheckpointVersion);
    w.put_string(blob.str());
    w.put_u32(static_cast<uint32_t>(recs.size()));
    for (const auto& [name, r] : recs)
        write_record(w, name, r.dtype, r.dims, r.bytes.data(), r.bytes.size());

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot open checkpoint for writing: " + tmp);
        f.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
        if (!f) throw DataError("short write to " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw DataError("cannot rename " + tmp + " to " + path);
}

CheckpointState load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();

    Reader r(ss.str(), "header");
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::memcmp(magic, "APEX", 4) != 0) throw FormatError("bad checkpoint magic");
    const uint32_t version = r.get_u32();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));

    r.set_context("config blob");
    const std::string blob = r.get_string();
    const auto kv = parse_kv(blob);

    r.set_context("record count");
    const uint32_t n_records = r.get_u32();
    std::map<std::string, RawRecord> raw;
    for (uint32_t i = 0; i < n_records; ++i) {
        r.set_context("record " + std::to_string(i) + " name");
        const std::string name = r.get_string();
        r.set_context("record '" + name + "'");
        RawRecord rec;
        rec.dtype = r.get_u8();
        const uint32_t ndim = r.get_u32();
        for (uint32_t d = 0; d < ndim; ++d)
            rec.dims.push_back(static_cast<int64_t>(r.get_u64()));
        const size_t nbytes = static_cast<size_t>(rec.numel()) * dtype_size(rec.dtype);
        rec.bytes.resize(nbytes);
        r.get_bytes(rec.bytes.data(), nbytes);
        raw.emplace(name, std::move(rec));
    }

    CheckpointState state;
    apply_model_config(state.cfg, kv);
    apply_stage_plan(state.plan, kv);
    state.cfg.validate();
    for (const auto& [k, v] : kv)
        if (k.rfind("extra.", 0) == 0) state.extra[k.substr(6)] = v;

    const RecordMap records{std::move(raw)};
    state.params.cfg = state.cfg;
    state.params.layers.resize(static_cast<size_t>(state.cfg.n_layers));
    for_each_param(state.params, [&](const std::string& name, Tensor& t) {
        t = records.fetch_f32(name);
    });

    auto fetch_kv = [&kv](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw FormatError("missing config key '" + key + "'");
        return it->second;
    };

    const int op_count = std::stoi(fetch_kv("op.count"));
    for (int i = 0; i < op_count; ++i) {
        const std::string pre = "op." + std::to_string(i) + ".";
        ExpansionOperator op;
        op.layer = std::stoi(fetch_kv(pre + "layer"));
        op.target = target_matrix_from_name(fetch_kv(pre + "target"));
        op.orient = fetch_kv(pre + "orient") == "col" ? Orientation::Column : Orientation::Row;
        op.trainable = fetch_kv(pre + "trainable") == "1";
        op.fused = fetch_kv(pre + "fused") == "1";
        op.m.n = std::stoll(fetch_kv(pre + "n"));
        op.m.exact = fetch_kv(pre + "exact") == "1";
        op.m.d = op.m.exact ? exact_block_count(op.m.n) : 0;
        const std::string base = op.name();
        if (op.m.exact) {
            op.m.dfactor = records.fetch_f32(base + ".Dfactor");
            op.m.rfactor = records.fetch_f32(base + ".Rfactor");
        } else {
            op.m.dense = records.fetch_f32(base + ".dense");
        }
        const auto pidx = records.fetch_i64(base + ".pidx");
        const auto nidx = records.fetch_i64(base + ".nidx");
        op.p_idx.assign(pidx.begin(), pidx.end());
        op.n_idx.assign(nidx.begin(), nidx.end());
        state.operators.ops.push_back(std::move(op));
    }

    state.ledger = ActivationLedger::make(state.cfg);
    state.ledger.samples_seen = std::stoll(fetch_kv("ledger.samples_seen"));
    for (size_t li = 0; li < state.ledger.mha.size(); ++li) {
        const std::string pre = "ledger.mha." + std::to_string(li);
        state.ledger.mha[li].score = records.fetch_i64(pre + ".score");
        state.ledger.mha[li].norm_sum = records.fetch_f64(pre + ".sum");
    }
    for (size_t li = 0; li < state.ledger.ffn.size(); ++li) {
        const std::string pre = "ledger.ffn." + std::to_string(li);
        state.ledger.ffn[li].score = records.fetch_i64(pre + ".score");
        state.ledger.ffn[li].norm_sum = records.fetch_f64(pre + ".sum");
    }
    return state;
}

}  // namespace apex
