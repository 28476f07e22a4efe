#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "loctrans/attention.hpp"

namespace loctrans {

inline constexpr const char* kUnkToken = "<unk>";

// Ids 0..size-1; kept tokens come first in descending frequency, unk is last.
class Vocabulary {
public:
    Vocabulary() = default;
    // tokens must be unique; unk_token is appended when absent.
    explicit Vocabulary(std::vector<std::string> tokens);

    std::size_t size() const { return id_to_token_.size(); }
    std::int32_t unk_id() const { return unk_id_; }
    std::int32_t id(const std::string& token) const;
    const std::string& token(std::int32_t id) const;
    bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }
    const std::vector<std::string>& tokens() const { return id_to_token_; }

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

private:
    std::unordered_map<std::string, std::int32_t> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::int32_t unk_id_ = 0;
};

Vocabulary build_vocab(std::istream& text, std::size_t min_count);
Vocabulary build_vocab(const std::filesystem::path& path, std::size_t min_count);

std::vector<std::int32_t> encode(std::istream& text, const Vocabulary& vocab);
std::vector<std::int32_t> encode(const std::string& text, const Vocabulary& vocab);
std::string decode(std::span<const std::int32_t> ids, const Vocabulary& vocab);

struct CorpusSplits {
    std::vector<std::int32_t> train;
    std::vector<std::int32_t> valid;
    std::vector<std::int32_t> test;
    std::size_t vocab_size = 0;
};

CorpusSplits encode_splits(const std::filesystem::path& train, const std::filesystem::path& valid,
                           const std::filesystem::path& test, const Vocabulary& vocab);

// Binary token cache: "LTCORP01", u32 vocab size, u64 count, u32 ids (LE).
void write_token_cache(const std::filesystem::path& path, std::span<const std::int32_t> ids,
                       std::size_t vocab_size);
std::vector<std::int32_t> read_token_cache(const std::filesystem::path& path,
                                           std::size_t* vocab_size = nullptr);

// Ids are row-major [batch, seq_len]; targets are inputs shifted by one token.
struct Batch {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::vector<std::int32_t> inputs;
    std::vector<std::int32_t> targets;
};

// Non-overlapping windows of seq_len + 1 tokens sharing their boundary token;
// floor((len - 1) / seq_len) windows, remainder dropped. The last batch of an
// epoch may be short.
class Batcher {
public:
    Batcher(std::span<const std::int32_t> tokens, std::size_t seq_len, std::size_t batch_size,
            std::uint64_t seed);

    std::size_t windows() const { return windows_; }
    std::size_t batches_per_epoch() const { return (windows_ + batch_size_ - 1) / batch_size_; }

    // Window order for an epoch is a pure function of (seed, epoch).
    void start_epoch(std::size_t epoch);
    bool next(Batch& out);
    // Window w in the original (unshuffled) order, as a batch of one.
    Batch window(std::size_t w) const;
    const std::vector<std::size_t>& order() const { return order_; }

private:
    std::span<const std::int32_t> tokens_;
    std::size_t seq_len_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::size_t windows_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

// Derives an independent seed for a numbered stream (epoch, seed run, ...).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Deterministic Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed);

struct Block {
    std::size_t begin = 0;
    std::size_t end = 0; // exclusive
    std::vector<std::size_t> anchors;
    std::vector<double> weights; // parallel to anchors, sums to 1

    std::size_t size() const { return end - begin; }
    bool contains(std::size_t t) const { return t >= begin && t < end; }
};

struct BlockPartition {
    std::size_t seq_len = 0;
    std::size_t window = 0;
    std::vector<Block> blocks;

    std::size_t count() const { return blocks.size(); }
    std::size_t block_of(std::size_t t) const { return t / window; }
};

BlockPartition make_partition(std::size_t seq_len, std::size_t window);

// Column entropy (bits) of the attention each position receives, averaged over
// all (layer, head) maps of all records. Zero-mass columns score +inf.
std::vector<double> column_entropies(std::span<const AttentionRecord> records);

// Keeps per block the k lowest column-entropy positions (ties by index),
// k = min(k_max, max(k_min, |X_i|)) clamped to |X_i|, then reweights.
BlockPartition select_anchors(const BlockPartition& partition,
                              std::span<const AttentionRecord> records, std::size_t k_min,
                              std::size_t k_max);
BlockPartition select_anchors(const BlockPartition& partition, const AttentionRecord& record,
                              std::size_t k_min, std::size_t k_max);

// Deterministic article-style text with headings, topic vocabulary and
// templated sentences. Roughly `tokens` whitespace tokens.
struct SyntheticCorpusSpec {
    std::size_t train_tokens = 200000;
    std::size_t valid_tokens = 20000;
    std::size_t test_tokens = 20000;
    std::uint64_t seed = 7;
};

struct SyntheticCorpusText {
    std::string train;
    std::string valid;
    std::string test;
};

SyntheticCorpusText generate_corpus_text(const SyntheticCorpusSpec& spec);
void write_corpus_files(const SyntheticCorpusSpec& spec, const std::filesystem::path& dir);

} // namespace loctrans
