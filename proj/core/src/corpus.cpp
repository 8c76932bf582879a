#include "apex/corpus.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include "apex/errors.hpp"
#include "apex/rng.hpp"

namespace apex {

std::string fnv1a_hex(const std::string& bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

Corpus tokenize_bytes(const std::string& bytes) {
    Corpus c;
    c.tokens.reserve(bytes.size() + 1);
    c.tokens.push_back(kBosId);
    for (unsigned char b : bytes) c.tokens.push_back(static_cast<int>(b));
    c.digest = fnv1a_hex(bytes);
    return c;
}

std::string detokenize(const Corpus& corpus) {
    std::string out;
    out.reserve(corpus.tokens.size());
    for (int t : corpus.tokens) {
        if (t < 0 || t >= kByteVocabSize) throw IndexError("token id out of vocabulary");
        if (t < 256) out.push_back(static_cast<char>(t));
    }
    return out;
}

Corpus load_corpus_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open corpus file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return tokenize_bytes(ss.str());
}

namespace {

const std::array<const char*, 48> kWords = {
    "the",  "a",     "model",  "weight", "train",  "data",   "token",  "layer",
    "head", "gate",  "norm",   "loss",   "rank",   "stage",  "score",  "batch",
    "step", "value", "vector", "matrix", "stream", "merge",  "split",  "scale",
    "grow", "prune", "dense",  "sparse", "linear", "signal", "sample", "window",
    "deep", "wide",  "small",  "large",  "fast",   "slow",   "early",  "late",
    "over", "under", "into",   "around", "after",  "before", "with",   "without"};

}  // namespace

std::string make_synthetic_text(size_t n_bytes, uint64_t seed) {
    Rng rng(seed_stream(seed, 0xc01edUL));
    std::string out;
    out.reserve(n_bytes + 16);
    int words_in_sentence = 0;
    while (out.size() < n_bytes) {
        // Simple first-order structure: word choice depends on a drifting topic.
        const size_t topic = static_cast<size_t>(rng.below(6));
        const size_t w = topic * 8 + static_cast<size_t>(rng.below(8));
        out += kWords[w % kWords.size()];
        ++words_in_sentence;
        if (words_in_sentence >= 6 && rng.uniform() < 0.3) {
            out += rng.uniform() < 0.2 ? ".\n" : ". ";
            words_in_sentence = 0;
        } else {
            out += ' ';
        }
    }
    out.resize(n_bytes);
    return out;
}

std::string make_pattern_text(size_t n_bytes, int period, uint64_t seed) {
    if (period < 1) throw ConfigError("pattern period must be >= 1");
    Rng rng(seed_stream(seed, 0xbeedUL));
    std::string unit;
    unit.reserve(static_cast<size_t>(period));
    for (int i = 0; i < period; ++i)
        unit.push_back(static_cast<char>('a' + static_cast<char>(rng.below(26))));
    std::string out;
    out.reserve(n_bytes);
    while (out.size() < n_bytes) out += unit;
    out.resize(n_bytes);
    return out;
}

BatchIter::BatchIter(const std::vector<int>& stream, int seq_len, int batch_size, uint64_t seed,
                     bool shuffle)
    : stream_(&stream), seq_len_(seq_len), batch_size_(batch_size), seed_(seed),
      shuffle_(shuffle) {
    if (seq_len < 1 || batch_size < 1) throw ConfigError("seq_len and batch_size must be >= 1");
    if (static_cast<int64_t>(stream.size()) <= seq_len)
        throw DataError("corpus too short for one window");
    n_windows_ = (static_cast<int64_t>(stream.size()) - 1) / seq_len;
    if (batches_per_epoch() == 0) throw DataError("corpus too short for one batch");
    start_epoch();
}

void BatchIter::start_epoch() {
    order_.resize(static_cast<size_t>(n_windows_));
    for (int64_t i = 0; i < n_windows_; ++i) order_[static_cast<size_t>(i)] = i;
    if (shuffle_) {
        Rng rng(seed_stream(seed_, 0xe90c + static_cast<uint64_t>(epoch_)));
        for (int64_t i = n_windows_ - 1; i > 0; --i) {
            const int64_t j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
            std::swap(order_[static_cast<size_t>(i)], order_[static_cast<size_t>(j)]);
        }
    }
    cursor_ = 0;
}

BatchIter::Batch BatchIter::next() {
    if (cursor_ + batch_size_ > batches_per_epoch() * batch_size_) {
        ++epoch_;
        start_epoch();
    }
    Batch b;
    b.inputs.resize(static_cast<size_t>(batch_size_));
    b.targets.resize(static_cast<size_t>(batch_size_));
    for (int i = 0; i < batch_size_; ++i) {
        const int64_t w = order_[static_cast<size_t>(cursor_ + i)];
        const int64_t off = w * seq_len_;
        b.inputs[static_cast<size_t>(i)].assign(stream_->begin() + off,
                                                stream_->begin() + off + seq_len_);
        b.targets[static_cast<size_t>(i)].assign(stream_->begin() + off + 1,
                                                 stream_->begin() + off + seq_len_ + 1);
    }
    cursor_ += batch_size_;
    return b;
}

}  // namespace apex
