#include "loctrans/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "loctrans/error.hpp"
#include "loctrans/log.hpp"
#include "loctrans/metrics.hpp"

namespace loctrans {

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
    id_to_token_ = std::move(tokens);
    bool has_unk = false;
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
        const auto& tok = id_to_token_[i];
        if (!token_to_id_.emplace(tok, static_cast<std::int32_t>(i)).second) {
            throw InputError("duplicate vocabulary token '" + tok + "'");
        }
        if (tok == kUnkToken) {
            unk_id_ = static_cast<std::int32_t>(i);
            has_unk = true;
        }
    }
    if (!has_unk) {
        unk_id_ = static_cast<std::int32_t>(id_to_token_.size());
        id_to_token_.emplace_back(kUnkToken);
        token_to_id_.emplace(kUnkToken, unk_id_);
    }
}

std::int32_t Vocabulary::id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? unk_id_ : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
        throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " +
                         std::to_string(id_to_token_.size()));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary file " + path.string());
    for (const auto& tok : id_to_token_) out << tok << '\n';
    if (!out) throw IoError("failed writing vocabulary file " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open vocabulary file " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    if (tokens.empty()) throw InputError("empty vocabulary file " + path.string());
    return Vocabulary(std::move(tokens));
}

Vocabulary build_vocab(std::istream& text, std::size_t min_count) {
    std::unordered_map<std::string, std::size_t> counts;
    std::string word;
    std::size_t total = 0;
    while (text >> word) {
        ++total;
        if (word != kUnkToken) ++counts[word];
    }
    if (total == 0) throw InputError("cannot build a vocabulary from an empty text stream");

    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [tok, n] : counts) {
        if (n >= min_count) kept.emplace_back(tok, n);
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    std::vector<std::string> tokens;
    tokens.reserve(kept.size() + 1);
    for (auto& [tok, n] : kept) tokens.push_back(std::move(tok));
    return Vocabulary(std::move(tokens));
}

Vocabulary build_vocab(const std::filesystem::path& path, std::size_t min_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open text file " + path.string());
    return build_vocab(in, min_count);
}

std::vector<std::int32_t> encode(std::istream& text, const Vocabulary& vocab) {
    std::vector<std::int32_t> ids;
    std::string word;
    while (text >> word) ids.push_back(vocab.id(word));
    return ids;
}

std::vector<std::int32_t> encode(const std::string& text, const Vocabulary& vocab) {
    std::istringstream in(text);
    return encode(in, vocab);
}

std::string decode(std::span<const std::int32_t> ids, const Vocabulary& vocab) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += vocab.token(ids[i]);
    }
    return out;
}

CorpusSplits encode_splits(const std::filesystem::path& train, const std::filesystem::path& valid,
                           const std::filesystem::path& test, const Vocabulary& vocab) {
    auto load = [&](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw IoError("cannot open corpus split " + p.string());
        return encode(in, vocab);
    };
    CorpusSplits splits;
    splits.train = load(train);
    splits.valid = load(valid);
    splits.test = load(test);
    splits.vocab_size = vocab.size();
    log_info("corpus splits: train " + std::to_string(splits.train.size()) + ", valid " +
             std::to_string(splits.valid.size()) + ", test " + std::to_string(splits.test.size()) +
             " tokens, vocabulary " + std::to_string(vocab.size()));
    return splits;
}

namespace {

constexpr std::array<char, 8> kCorpusMagic = {'L', 'T', 'C', 'O', 'R', 'P', '0', '1'};

template <typename T>
void put_le(std::ostream& out, T value) {
    std::array<char, sizeof(T)> bytes{};
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        bytes[i] = static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
    }
    out.write(bytes.data(), bytes.size());
}

template <typename T>
T get_le(std::istream& in, const std::filesystem::path& path) {
    std::array<unsigned char, sizeof(T)> bytes{};
    in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (!in) throw IoError("truncated token cache " + path.string());
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t{bytes[i]} << (8 * i);
    return static_cast<T>(v);
}

} // namespace

void write_token_cache(const std::filesystem::path& path, std::span<const std::int32_t> ids,
                       std::size_t vocab_size) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write token cache " + path.string());
    out.write(kCorpusMagic.data(), kCorpusMagic.size());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(vocab_size));
    put_le<std::uint64_t>(out, ids.size());
    for (auto id : ids) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(id));
    if (!out) throw IoError("failed writing token cache " + path.string());
}

std::vector<std::int32_t> read_token_cache(const std::filesystem::path& path,
                                           std::size_t* vocab_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open token cache " + path.string());
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kCorpusMagic) throw IoError("bad token cache magic in " + path.string());
    const auto vsize = get_le<std::uint32_t>(in, path);
    const auto count = get_le<std::uint64_t>(in, path);
    std::vector<std::int32_t> ids(count);
    for (auto& id : ids) {
        const auto v = get_le<std::uint32_t>(in, path);
        if (v >= vsize) throw InputError("token id out of range in " + path.string());
        id = static_cast<std::int32_t>(v);
    }
    if (vocab_size) *vocab_size = vsize;
    return ids;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over the combined words.
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

Batcher::Batcher(std::span<const std::int32_t> tokens, std::size_t seq_len,
                 std::size_t batch_size, std::uint64_t seed)
    : tokens_(tokens), seq_len_(seq_len), batch_size_(batch_size), seed_(seed) {
    if (seq_len == 0 || batch_size == 0) {
        throw ParameterError("sequence length and batch size must be positive");
    }
    if (tokens.size() < seq_len + 1) {
        throw InputError("split of " + std::to_string(tokens.size()) +
                         " tokens is shorter than sequence length + 1 = " +
                         std::to_string(seq_len + 1));
    }
    windows_ = (tokens.size() - 1) / seq_len;
    start_epoch(0);
}

void Batcher::start_epoch(std::size_t epoch) {
    order_ = shuffled_indices(windows_, mix_seed(seed_, epoch));
    cursor_ = 0;
}

bool Batcher::next(Batch& out) {
    if (cursor_ >= windows_) return false;
    const std::size_t b = std::min(batch_size_, windows_ - cursor_);
    out.batch = b;
    out.seq_len = seq_len_;
    out.inputs.resize(b * seq_len_);
    out.targets.resize(b * seq_len_);
    for (std::size_t r = 0; r < b; ++r) {
        const std::size_t start = order_[cursor_ + r] * seq_len_;
        std::copy_n(tokens_.begin() + static_cast<std::ptrdiff_t>(start), seq_len_,
                    out.inputs.begin() + static_cast<std::ptrdiff_t>(r * seq_len_));
        std::copy_n(tokens_.begin() + static_cast<std::ptrdiff_t>(start + 1), seq_len_,
                    out.targets.begin() + static_cast<std::ptrdiff_t>(r * seq_len_));
    }
    cursor_ += b;
    return true;
}

Batch Batcher::window(std::size_t w) const {
    if (w >= windows_) throw IndexError("window " + std::to_string(w) + " out of range");
    Batch out;
    out.batch = 1;
    out.seq_len = seq_len_;
    const auto first = tokens_.begin() + static_cast<std::ptrdiff_t>(w * seq_len_);
    out.inputs.assign(first, first + static_cast<std::ptrdiff_t>(seq_len_));
    out.targets.assign(first + 1, first + 1 + static_cast<std::ptrdiff_t>(seq_len_));
    return out;
}

BlockPartition make_partition(std::size_t seq_len, std::size_t window) {
    if (window == 0) throw ParameterError("block window must be positive");
    if (seq_len == 0) throw ParameterError("sequence length must be positive");
    if (window > seq_len) {
        throw ParameterError("block window " + std::to_string(window) +
                             " exceeds sequence length " + std::to_string(seq_len));
    }
    BlockPartition p;
    p.seq_len = seq_len;
    p.window = window;
    for (std::size_t begin = 0; begin < seq_len; begin += window) {
        Block b;
        b.begin = begin;
        b.end = std::min(seq_len, begin + window);
        for (std::size_t t = b.begin; t < b.end; ++t) b.anchors.push_back(t);
        b.weights.assign(b.size(), 1.0 / static_cast<double>(b.size()));
        p.blocks.push_back(std::move(b));
    }
    return p;
}

std::vector<double> column_entropies(std::span<const AttentionRecord> records) {
    if (records.empty()) throw InputError("no attention records");
    const std::size_t n = records.front().seq_len;
    std::vector<double> total(n, 0.0);
    std::size_t maps = 0;
    std::vector<double> col(n);
    for (const auto& rec : records) {
        if (rec.seq_len != n) throw ShapeError("attention records disagree on sequence length");
        for (const auto& m : rec.maps) {
            ++maps;
            for (std::size_t j = 0; j < n; ++j) {
                double mass = 0.0;
                for (std::size_t t = 0; t < n; ++t) mass += m[t * n + j];
                if (mass <= 0.0) {
                    total[j] = std::numeric_limits<double>::infinity();
                    continue;
                }
                double h = 0.0;
                for (std::size_t t = 0; t < n; ++t) {
                    const double p = m[t * n + j] / mass;
                    if (p > 0.0) h -= p * std::log2(p);
                }
                total[j] += h;
            }
        }
    }
    for (auto& v : total) v /= static_cast<double>(maps);
    return total;
}

BlockPartition select_anchors(const BlockPartition& partition,
                              std::span<const AttentionRecord> records, std::size_t k_min,
                              std::size_t k_max) {
    if (k_min < 1 || k_min > k_max) {
        throw ParameterError("anchor counts need 1 <= k_min <= k_max");
    }
    if (records.empty() || records.front().seq_len != partition.seq_len) {
        throw ShapeError("attention records do not cover the partition's positions");
    }
    const auto entropy = column_entropies(records);
    BlockPartition out = partition;
    for (auto& block : out.blocks) {
        std::size_t k = std::min(k_max, std::max(k_min, block.size()));
        if (k_min > block.size()) {
            log_warn("k_min " + std::to_string(k_min) + " exceeds block size " +
                     std::to_string(block.size()) + "; clamped");
        }
        k = std::min(k, block.size());
        std::vector<std::size_t> pos;
        for (std::size_t t = block.begin; t < block.end; ++t) pos.push_back(t);
        std::stable_sort(pos.begin(), pos.end(),
                         [&](std::size_t a, std::size_t b) { return entropy[a] < entropy[b]; });
        pos.resize(k);
        std::sort(pos.begin(), pos.end());
        block.anchors = std::move(pos);
        block.weights.assign(k, 1.0 / static_cast<double>(k));
    }
    const auto weights = anchor_weights(records, out);
    for (std::size_t i = 0; i < out.blocks.size(); ++i) out.blocks[i].weights = weights[i];
    return out;
}

BlockPartition select_anchors(const BlockPartition& partition, const AttentionRecord& record,
                              std::size_t k_min, std::size_t k_max) {
    return select_anchors(partition, std::span<const AttentionRecord>(&record, 1), k_min, k_max);
}

// ---------------------------------------------------------------------------
// Synthetic article generator.

namespace {

class TextGen {
public:
    explicit TextGen(std::uint64_t seed) : rng_(seed) { build_lexicon(); }

    // Appends whole articles until at least `tokens` tokens were produced.
    std::string articles(std::size_t tokens) {
        std::vector<std::string> out;
        std::size_t produced = 0;
        while (produced < tokens) {
            const std::size_t before = out.size();
            article(out);
            produced += static_cast<std::size_t>(
                std::count_if(out.begin() + static_cast<std::ptrdiff_t>(before), out.end(),
                              [](const std::string& w) { return w != "\n"; }));
        }
        std::string text;
        for (const auto& w : out) {
            if (w == "\n") {
                text += '\n';
                continue;
            }
            if (!text.empty() && text.back() != '\n') text += ' ';
            text += w;
        }
        text += '\n';
        return text;
    }

private:
    static constexpr std::size_t kTopics = 16;
    static constexpr std::size_t kClasses = 4;

    struct Topic {
        std::vector<std::string> nouns, adjectives, names, verbs;
    };

    std::mt19937_64 rng_;
    std::vector<Topic> topics_;
    std::vector<std::string> nouns_, adjectives_, names_;
    std::vector<std::size_t> noun_class_;
    std::array<std::vector<std::string>, kClasses> verbs_;
    std::vector<std::string> sections_ = {"History", "Description", "Reception", "Legacy",
                                          "Background", "Career", "Design", "Aftermath"};

    std::size_t uniform(std::size_t n) { return static_cast<std::size_t>(rng_() % n); }
    bool chance(double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p; }

    // Zipf-like draw over a list: index ~ floor(n * u^2).
    std::size_t zipf(std::size_t n) {
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
        return std::min(n - 1, static_cast<std::size_t>(static_cast<double>(n) * u * u));
    }

    std::string make_word(std::size_t syllables, bool capital) {
        static const std::array<const char*, 16> onset = {"b", "c", "d", "f", "g", "k", "l", "m",
                                                          "n", "p", "r", "s", "t", "v", "br", "st"};
        static const std::array<const char*, 6> vowel = {"a", "e", "i", "o", "u", "ai"};
        static const std::array<const char*, 6> coda = {"", "n", "r", "l", "s", "th"};
        std::string w;
        for (std::size_t s = 0; s < syllables; ++s) {
            w += onset[uniform(onset.size())];
            w += vowel[uniform(vowel.size())];
        }
        w += coda[uniform(coda.size())];
        if (capital) w[0] = static_cast<char>(w[0] - 'a' + 'A');
        return w;
    }

    std::vector<std::string> unique_words(std::size_t n, std::size_t syllables, bool capital,
                                          const std::string& suffix,
                                          std::map<std::string, int>& used) {
        std::vector<std::string> out;
        while (out.size() < n) {
            std::string w = make_word(syllables, capital) + suffix;
            if (used.emplace(w, 0).second) out.push_back(std::move(w));
        }
        return out;
    }

    void build_lexicon() {
        std::map<std::string, int> used;
        for (const char* fw : {"the", "of", "and", "in", "a", "was", "is", "to", "by", "with",
                               "for", "on", "as", "at", "from", "it", "its", "which", "that",
                               "were", "has", "had", "be", "an", "one", "during", "after",
                               "season", "also", "he", "she", "they", "first", "later"}) {
            used.emplace(fw, 0);
        }
        nouns_ = unique_words(220, 2, false, "", used);
        adjectives_ = unique_words(60, 2, false, "ic", used);
        names_ = unique_words(50, 2, true, "", used);
        for (std::size_t i = 0; i < nouns_.size(); ++i) noun_class_.push_back(i % kClasses);
        for (auto& v : verbs_) v = unique_words(18, 2, false, "ed", used);
        for (std::size_t t = 0; t < kTopics; ++t) {
            Topic topic;
            topic.nouns = unique_words(24, 3, false, "", used);
            topic.adjectives = unique_words(8, 2, false, "al", used);
            topic.names = unique_words(6, 3, true, "", used);
            topic.verbs = unique_words(6, 2, false, "ed", used);
            topics_.push_back(std::move(topic));
        }
    }

    struct Article {
        const Topic* topic;
        std::string subject;
        std::string subject_noun;
        std::size_t subject_class;
    };

    std::string noun(const Article& a, std::size_t* cls) {
        if (chance(0.5)) {
            const auto i = uniform(a.topic->nouns.size());
            if (cls) *cls = i % kClasses;
            return a.topic->nouns[i];
        }
        const auto i = zipf(nouns_.size());
        if (cls) *cls = noun_class_[i];
        return nouns_[i];
    }
    std::string noun(const Article& a) { return noun(a, nullptr); }

    std::string adjective(const Article& a) {
        if (chance(0.4)) return a.topic->adjectives[uniform(a.topic->adjectives.size())];
        return adjectives_[zipf(adjectives_.size())];
    }

    std::string name(const Article& a) {
        if (chance(0.5)) return a.subject;
        if (chance(0.5)) return a.topic->names[uniform(a.topic->names.size())];
        return names_[zipf(names_.size())];
    }

    std::string verb(const Article& a, std::size_t cls) {
        if (chance(0.25)) return a.topic->verbs[uniform(a.topic->verbs.size())];
        return verbs_[cls][zipf(verbs_[cls].size())];
    }

    std::string year() { return std::to_string(1850 + uniform(160)); }

    void sentence(const Article& a, std::vector<std::string>& out) {
        auto emit = [&](std::initializer_list<std::string> ws) {
            out.insert(out.end(), ws.begin(), ws.end());
        };
        std::size_t cls = 0;
        switch (uniform(7)) {
        case 0: {
            const auto adj = adjective(a);
            const auto n = noun(a, &cls);
            emit({"the", adj, n, verb(a, cls), "the", noun(a), "of", name(a), "."});
            break;
        }
        case 1:
            emit({"in", year(), ",", a.subject, verb(a, a.subject_class), "a", adjective(a),
                  noun(a), "."});
            break;
        case 2:
            emit({a.subject, "was", "a", adjective(a), a.subject_noun, "in", "the", noun(a), "."});
            break;
        case 3: {
            const auto n = noun(a, &cls);
            emit({"the", n, "of", a.subject, "was", verb(a, cls), "by", name(a), "in", year(),
                  "."});
            break;
        }
        case 4: {
            emit({"it", "is", "one", "of", "the", adjective(a), a.subject_noun, "in", "the",
                  noun(a), ",", "and", "it", verb(a, a.subject_class), "the", noun(a), "."});
            break;
        }
        case 5: {
            emit({"during", "the", year(), "season", ",", name(a), verb(a, a.subject_class),
                  "the", noun(a), "with", "the", adjective(a), noun(a), "."});
            break;
        }
        default: {
            const auto n = noun(a, &cls);
            emit({"after", "the", n, ",", a.subject, "also", verb(a, a.subject_class), "its",
                  adjective(a), a.subject_noun, "."});
            break;
        }
        }
    }

    void article(std::vector<std::string>& out) {
        Article a;
        a.topic = &topics_[uniform(topics_.size())];
        a.subject = a.topic->names[uniform(a.topic->names.size())];
        const auto ni = uniform(a.topic->nouns.size());
        a.subject_noun = a.topic->nouns[ni];
        a.subject_class = ni % kClasses;
        out.insert(out.end(), {"=", a.subject, a.subject_noun, "=", "\n"});
        const std::size_t sections = 2 + uniform(3);
        for (std::size_t s = 0; s < sections; ++s) {
            if (s > 0) {
                out.insert(out.end(), {"=", "=", sections_[uniform(sections_.size())], "=", "=",
                                       "\n"});
            }
            const std::size_t sentences = 3 + uniform(5);
            for (std::size_t k = 0; k < sentences; ++k) sentence(a, out);
            out.emplace_back("\n");
        }
    }
};

std::size_t count_tokens(const std::string& text) {
    std::istringstream in(text);
    std::string w;
    std::size_t n = 0;
    while (in >> w) ++n;
    return n;
}

} // namespace

SyntheticCorpusText generate_corpus_text(const SyntheticCorpusSpec& spec) {
    if (spec.train_tokens == 0 || spec.valid_tokens == 0 || spec.test_tokens == 0) {
        throw ParameterError("every synthetic split needs a positive token count");
    }
    TextGen gen(spec.seed);
    SyntheticCorpusText text;
    text.train = gen.articles(spec.train_tokens);
    text.valid = gen.articles(spec.valid_tokens);
    text.test = gen.articles(spec.test_tokens);
    log_info("synthetic corpus: " + std::to_string(count_tokens(text.train)) + " / " +
             std::to_string(count_tokens(text.valid)) + " / " +
             std::to_string(count_tokens(text.test)) + " tokens");
    return text;
}

void write_corpus_files(const SyntheticCorpusSpec& spec, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto text = generate_corpus_text(spec);
    auto write = [&](const char* name, const std::string& body) {
        const auto path = dir / name;
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path.string());
        out << body;
        if (!out) throw IoError("failed writing " + path.string());
    };
    write("train.txt", text.train);
    write("valid.txt", text.valid);
    write("test.txt", text.test);
}

} // namespace loctrans
