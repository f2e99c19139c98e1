#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sinklab/rng.hpp"

namespace sinklab {

struct TokenSeq {
    std::vector<std::uint32_t> ids;

    std::size_t size() const { return ids.size(); }
    bool operator==(const TokenSeq&) const = default;
};

// Byte-level tokenization: identity map byte -> id, vocab 256, lossless.
TokenSeq tokenize_bytes(const std::string& text);
std::string detokenize_bytes(const TokenSeq& seq);

struct Corpus {
    std::string source_path;
    TokenSeq stream;

    std::size_t token_count() const { return stream.size(); }
};

Corpus load_corpus(const std::string& path);
Corpus corpus_from_text(const std::string& text);

// Training chunk: seq_len inputs plus the shifted targets (targets[i] is the
// token following inputs[i]).
struct Chunk {
    TokenSeq inputs;
    TokenSeq targets;
};

// Non-overlapping chunks of seq_len+1 tokens; the trailing remainder is
// dropped. A corpus shorter than seq_len+1 tokens is an error.
std::vector<Chunk> chunk_corpus(const Corpus& corpus, std::size_t seq_len);

// Deterministic held-out split: shuffles chunk indices with the seed and
// reserves the first eval_chunks for evaluation.
struct CorpusSplit {
    std::vector<Chunk> train;
    std::vector<Chunk> eval;
};
CorpusSplit split_chunks(std::vector<Chunk> chunks, std::size_t eval_chunks, std::uint64_t seed);

// Without-replacement sampling within an epoch, reshuffled per epoch from the
// seeded generator. Requests larger than the remaining epoch wrap into the
// next epoch's permutation.
class BatchSampler {
public:
    BatchSampler(std::size_t chunk_count, std::uint64_t seed);

    std::vector<std::size_t> next(std::size_t batch_size);
    std::size_t epoch() const { return epoch_; }

private:
    void reshuffle();

    std::size_t count_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
};

}  // namespace sinklab
