#include "sinklab/data.hpp"

#include <fstream>

#include "sinklab/error.hpp"

namespace sinklab {

TokenSeq tokenize_bytes(const std::string& text) {
    TokenSeq seq;
    seq.ids.reserve(text.size());
    for (unsigned char c : text) seq.ids.push_back(static_cast<std::uint32_t>(c));
    return seq;
}

std::string detokenize_bytes(const TokenSeq& seq) {
    std::string text;
    text.reserve(seq.ids.size());
    for (std::uint32_t id : seq.ids) {
        if (id > 255)
            throw DataError("detokenize_bytes: id " + std::to_string(id) + " is not a byte");
        text.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return text;
}

Corpus load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("failed reading corpus file '" + path + "'");
    Corpus corpus = corpus_from_text(text);
    corpus.source_path = path;
    return corpus;
}

Corpus corpus_from_text(const std::string& text) {
    Corpus corpus;
    corpus.stream = tokenize_bytes(text);
    return corpus;
}

std::vector<Chunk> chunk_corpus(const Corpus& corpus, std::size_t seq_len) {
    if (seq_len < 2) throw ConfigError("chunk_corpus: seq_len must be at least 2");
    const std::size_t stride = seq_len + 1;
    const std::size_t n_chunks = corpus.token_count() / stride;
    if (n_chunks == 0)
        throw DataError("corpus has " + std::to_string(corpus.token_count()) +
                        " tokens, need at least " + std::to_string(stride));
    std::vector<Chunk> chunks(n_chunks);
    for (std::size_t c = 0; c < n_chunks; ++c) {
        const std::uint32_t* base = corpus.stream.ids.data() + c * stride;
        chunks[c].inputs.ids.assign(base, base + seq_len);
        chunks[c].targets.ids.assign(base + 1, base + stride);
    }
    return chunks;
}

CorpusSplit split_chunks(std::vector<Chunk> chunks, std::size_t eval_chunks, std::uint64_t seed) {
    if (eval_chunks >= chunks.size())
        throw DataError("eval split of " + std::to_string(eval_chunks) + " chunks leaves no " +
                        "training data (corpus has " + std::to_string(chunks.size()) + ")");
    std::vector<std::size_t> order(chunks.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.below(i)]);
    CorpusSplit split;
    split.eval.reserve(eval_chunks);
    split.train.reserve(chunks.size() - eval_chunks);
    for (std::size_t i = 0; i < order.size(); ++i) {
        if (i < eval_chunks)
            split.eval.push_back(std::move(chunks[order[i]]));
        else
            split.train.push_back(std::move(chunks[order[i]]));
    }
    return split;
}

BatchSampler::BatchSampler(std::size_t chunk_count, std::uint64_t seed)
    : count_(chunk_count), rng_(seed) {
    if (count_ == 0) throw DataError("BatchSampler: no chunks to sample");
    order_.resize(count_);
    reshuffle();
}

void BatchSampler::reshuffle() {
    for (std::size_t i = 0; i < count_; ++i) order_[i] = i;
    for (std::size_t i = count_; i > 1; --i)
        std::swap(order_[i - 1], order_[rng_.below(i)]);
    cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch_size) {
    if (batch_size == 0) throw ContractError("BatchSampler: batch_size must be positive");
    std::vector<std::size_t> batch;
    batch.reserve(batch_size);
    while (batch.size() < batch_size) {
        if (cursor_ == count_) {
            reshuffle();
            ++epoch_;
        }
        batch.push_back(order_[cursor_++]);
    }
    return batch;
}

}  // namespace sinklab
