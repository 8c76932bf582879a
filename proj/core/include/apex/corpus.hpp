#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace apex {

// Byte-level vocabulary: ids 0..255 are raw bytes, 256..259 are reserved.
constexpr int kPadId = 256;
constexpr int kBosId = 257;
constexpr int kEosId = 258;
constexpr int kUnkId = 259;
constexpr int kByteVocabSize = 260;

struct Corpus {
    std::vector<int> tokens;
    std::string digest;  // fnv1a-64 of the source bytes, hex
};

std::string fnv1a_hex(const std::string& bytes);

// Identity byte mapping with a bos marker at the document start.
Corpus tokenize_bytes(const std::string& bytes);

// Inverse for the byte range; reserved ids are dropped.
std::string detokenize(const Corpus& corpus);

Corpus load_corpus_file(const std::string& path);

// Deterministic English-like filler text (word soup with punctuation),
// learnable but not trivially periodic.
std::string make_synthetic_text(size_t n_bytes, uint64_t seed);

// Deterministic cyclic pattern text with the given period.
std::string make_pattern_text(size_t n_bytes, int period, uint64_t seed);

// Stride-L windows over the token stream: window w covers inputs
// [w*L, w*L+L) with targets shifted one position. The trailing partial
// window is dropped, as is any trailing group smaller than a full batch.
// Each epoch is reshuffled from the seed (identity order when shuffle off).
class BatchIter {
public:
    struct Batch {
        std::vector<std::vector<int>> inputs;   // B x L
        std::vector<std::vector<int>> targets;  // B x L
    };

    BatchIter(const std::vector<int>& stream, int seq_len, int batch_size, uint64_t seed,
              bool shuffle);

    int64_t windows() const { return n_windows_; }
    int64_t batches_per_epoch() const { return n_windows_ / batch_size_; }
    int64_t tokens_per_batch() const { return static_cast<int64_t>(batch_size_) * seq_len_; }

    Batch next();

private:
    void start_epoch();

    const std::vector<int>* stream_;
    int seq_len_;
    int batch_size_;
    uint64_t seed_;
    bool shuffle_;
    int64_t n_windows_;
    int64_t epoch_ = 0;
    int64_t cursor_ = 0;  // window position within the epoch order
    std::vector<int64_t> order_;
};

}  // namespace apex
