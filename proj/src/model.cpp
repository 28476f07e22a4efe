#include "loctrans/model.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "loctrans/error.hpp"
#include "loctrans/ops.hpp"

namespace loctrans {

using nlohmann::json;

std::string to_string(PenaltyTarget target) {
    return target == PenaltyTarget::projected ? "projected" : "offset";
}

PenaltyTarget penalty_target_from_string(const std::string& name) {
    if (name == "projected") return PenaltyTarget::projected;
    if (name == "offset") return PenaltyTarget::offset;
    throw ParameterError("unknown penalty target '" + name + "' (expected projected or offset)");
}

namespace {

std::size_t block_count(const ModelConfig& c) {
    return (c.seq_len + c.block_window - 1) / c.block_window;
}

} // namespace

void ModelConfig::validate() const {
    if (d_model == 0 || d_head == 0 || n_heads == 0 || n_layers == 0 || seq_len == 0 ||
        ffn_mult == 0) {
        throw ParameterError("model dimensions must all be positive");
    }
    if (vocab_size < 2) throw ParameterError("vocabulary needs at least two entries");
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw ParameterError("temperature must be positive, got " + std::to_string(tau));
    }
    if (block_window == 0 || block_window > seq_len) {
        throw ParameterError("block window must lie in [1, N]");
    }
    if (penalty_target == PenaltyTarget::offset) {
        if (offset_rank < block_count(*this)) {
            throw ParameterError("offset rank " + std::to_string(offset_rank) +
                                 " cannot hold one code per block (" +
                                 std::to_string(block_count(*this)) + " blocks)");
        }
        if (!(block_margin >= 0.0)) throw ParameterError("block margin must be non-negative");
    }
}

void to_json(json& j, const ModelConfig& c) {
    j = json{{"d_model", c.d_model},
             {"d_head", c.d_head},
             {"n_heads", c.n_heads},
             {"n_layers", c.n_layers},
             {"seq_len", c.seq_len},
             {"vocab_size", c.vocab_size},
             {"tau", c.tau},
             {"ffn_mult", c.ffn_mult},
             {"block_window", c.block_window},
             {"train_block_embedding", c.train_block_embedding},
             {"train_intra_sinusoid", c.train_intra_sinusoid},
             {"penalty_target", to_string(c.penalty_target)},
             {"block_margin", c.block_margin},
             {"offset_rank", c.offset_rank}};
}

void from_json(const json& j, ModelConfig& c) {
    ModelConfig d;
    c.d_model = j.value("d_model", d.d_model);
    c.d_head = j.value("d_head", d.d_head);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.seq_len = j.value("seq_len", d.seq_len);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.tau = j.value("tau", d.tau);
    c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
    c.block_window = j.value("block_window", d.block_window);
    c.train_block_embedding = j.value("train_block_embedding", d.train_block_embedding);
    c.train_intra_sinusoid = j.value("train_intra_sinusoid", d.train_intra_sinusoid);
    c.penalty_target =
        penalty_target_from_string(j.value("penalty_target", to_string(d.penalty_target)));
    c.block_margin = j.value("block_margin", d.block_margin);
    c.offset_rank = j.value("offset_rank", d.offset_rank);
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("token_embedding", token_embedding);
    out.emplace_back("block_embedding", block_embedding);
    out.emplace_back("intra_sinusoid", intra_sinusoid);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        out.emplace_back(p + "ln1_gain", L.ln1_gain);
        out.emplace_back(p + "ln1_bias", L.ln1_bias);
        for (std::size_t h = 0; h < L.w_q.size(); ++h) {
            const std::string hp = p + "head" + std::to_string(h) + ".";
            out.emplace_back(hp + "w_q", L.w_q[h]);
            out.emplace_back(hp + "w_k", L.w_k[h]);
            out.emplace_back(hp + "w_v", L.w_v[h]);
            if (!L.r_q.empty()) {
                out.emplace_back(hp + "r_q", L.r_q[h]);
                out.emplace_back(hp + "r_k", L.r_k[h]);
            }
        }
        out.emplace_back(p + "w_o", L.w_o);
        out.emplace_back(p + "ln2_gain", L.ln2_gain);
        out.emplace_back(p + "ln2_bias", L.ln2_bias);
        out.emplace_back(p + "w_ff1", L.w_ff1);
        out.emplace_back(p + "b_ff1", L.b_ff1);
        out.emplace_back(p + "w_ff2", L.w_ff2);
        out.emplace_back(p + "b_ff2", L.b_ff2);
    }
    out.emplace_back("lnf_gain", lnf_gain);
    out.emplace_back("lnf_bias", lnf_bias);
    out.emplace_back("w_out", w_out);
    out.emplace_back("b_out", b_out);
    return out;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::trainable() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, t] : named()) {
        if (t.requires_grad()) out.emplace_back(name, t);
    }
    return out;
}

std::size_t ModelParams::count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : trainable()) n += t.size();
    return n;
}

ModelParams ModelParams::clone() const {
    ModelParams out = *this;
    out.token_embedding = token_embedding.clone();
    out.block_embedding = block_embedding.clone();
    out.intra_sinusoid = intra_sinusoid.clone();
    for (auto& L : out.layers) {
        for (Tensor* t : {&L.ln1_gain, &L.ln1_bias, &L.w_o, &L.ln2_gain, &L.ln2_bias, &L.w_ff1,
                          &L.b_ff1, &L.w_ff2, &L.b_ff2}) {
            *t = t->clone();
        }
        for (auto* v : {&L.w_q, &L.w_k, &L.w_v, &L.r_q, &L.r_k}) {
            for (auto& t : *v) t = t.clone();
        }
    }
    out.lnf_gain = lnf_gain.clone();
    out.lnf_bias = lnf_bias.clone();
    out.w_out = w_out.clone();
    out.b_out = b_out.clone();
    return out;
}

std::size_t parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model, v = c.vocab_size, ff = c.ffn_mult * d;
    std::size_t n = v * d;                                   // token embedding
    if (c.train_block_embedding) n += block_count(c) * d;    // block embedding
    if (c.train_intra_sinusoid) n += c.block_window * d;     // intra-block sinusoid
    std::size_t layer = 2 * d;                                // ln1
    layer += 3 * c.n_heads * d * c.d_head;                    // W_Q, W_K, W_V
    if (c.penalty_target == PenaltyTarget::offset) layer += 2 * c.n_heads * c.seq_len * c.offset_rank;
    layer += c.n_heads * c.d_head * d;                        // W_O
    layer += 2 * d;                                           // ln2
    layer += d * ff + ff + ff * d + d;                        // feed-forward
    n += c.n_layers * layer;
    n += 2 * d;                                               // final norm
    n += d * v + v;                                           // output projection
    return n;
}

namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-s, s);
    Tensor t(Shape{fan_in, fan_out});
    for (auto& x : t.mutable_values()) x = u(rng);
    t.set_requires_grad(true);
    return t;
}

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, stddev);
    Tensor t(std::move(shape));
    for (auto& x : t.mutable_values()) x = g(rng);
    t.set_requires_grad(true);
    return t;
}

Tensor filled(Shape shape, double value) {
    Tensor t(std::move(shape), value);
    t.set_requires_grad(true);
    return t;
}

// Orthonormal rows c_0..c_{p-1} in R^r by Gram-Schmidt on Gaussian draws.
std::vector<std::vector<double>> orthonormal_codes(std::size_t p, std::size_t r,
                                                   std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<std::vector<double>> codes;
    while (codes.size() < p) {
        std::vector<double> v(r);
        for (auto& x : v) x = g(rng);
        for (const auto& c : codes) {
            double dot = 0.0;
            for (std::size_t i = 0; i < r; ++i) dot += v[i] * c[i];
            for (std::size_t i = 0; i < r; ++i) v[i] -= dot * c[i];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-6) continue;
        for (auto& x : v) x /= norm;
        codes.push_back(std::move(v));
    }
    return codes;
}

} // namespace

Tensor sinusoid_table(std::size_t rows, std::size_t d_model) {
    Tensor t(Shape{rows, d_model});
    for (std::size_t o = 0; o < rows; ++o) {
        for (std::size_t c = 0; c < d_model; ++c) {
            const double rate =
                std::pow(10000.0, -static_cast<double>(c - c % 2) / static_cast<double>(d_model));
            const double angle = static_cast<double>(o) * rate;
            t.at(o, c) = c % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    }
    return t;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config.d_model, ff = config.ffn_mult * d, p = block_count(config);
    ModelParams m;
    m.token_embedding = normal({config.vocab_size, d}, 0.02, rng);
    m.block_embedding = normal({p, d}, 0.02, rng);
    m.block_embedding.set_requires_grad(config.train_block_embedding);
    m.intra_sinusoid = sinusoid_table(config.block_window, d);
    m.intra_sinusoid.set_requires_grad(config.train_intra_sinusoid);

    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerParams L;
        L.ln1_gain = filled({d}, 1.0);
        L.ln1_bias = filled({d}, 0.0);
        for (std::size_t h = 0; h < config.n_heads; ++h) {
            L.w_q.push_back(xavier(d, config.d_head, rng));
            L.w_k.push_back(xavier(d, config.d_head, rng));
            L.w_v.push_back(xavier(d, config.d_head, rng));
        }
        if (config.penalty_target == PenaltyTarget::offset) {
            // Tables start by cancelling the same-block margin exactly, so every
            // run begins from unbiased attention.
            const double amp = std::sqrt(config.block_margin);
            const auto codes = orthonormal_codes(p, config.offset_rank, rng);
            for (std::size_t h = 0; h < config.n_heads; ++h) {
                Tensor rq(Shape{config.seq_len, config.offset_rank});
                Tensor rk(Shape{config.seq_len, config.offset_rank});
                for (std::size_t t = 0; t < config.seq_len; ++t) {
                    const auto& c = codes[t / config.block_window];
                    for (std::size_t i = 0; i < config.offset_rank; ++i) {
                        rq.at(t, i) = amp * c[i];
                        rk.at(t, i) = -amp * c[i];
                    }
                }
                L.r_q.push_back(rq.set_requires_grad(true));
                L.r_k.push_back(rk.set_requires_grad(true));
            }
        }
        L.w_o = xavier(config.n_heads * config.d_head, d, rng);
        L.ln2_gain = filled({d}, 1.0);
        L.ln2_bias = filled({d}, 0.0);
        L.w_ff1 = xavier(d, ff, rng);
        L.b_ff1 = filled({ff}, 0.0);
        L.w_ff2 = xavier(ff, d, rng);
        L.b_ff2 = filled({d}, 0.0);
        m.layers.push_back(std::move(L));
    }
    m.lnf_gain = filled({d}, 1.0);
    m.lnf_bias = filled({d}, 0.0);
    m.w_out = xavier(d, config.vocab_size, rng);
    m.b_out = filled({config.vocab_size}, 0.0);
    return m;
}

Tensor block_positional_encoding(const ModelParams& params, const BlockPartition& partition) {
    const std::size_t n = partition.seq_len;
    if (params.block_embedding.rows() < partition.count() ||
        params.intra_sinusoid.rows() < partition.window) {
        throw ShapeError("positional tables do not cover the partition");
    }
    std::vector<std::int32_t> block_ids(n), offsets(n);
    for (std::size_t i = 0; i < partition.count(); ++i) {
        const auto& b = partition.blocks[i];
        for (std::size_t t = b.begin; t < b.end; ++t) {
            block_ids[t] = static_cast<std::int32_t>(i);
            offsets[t] = static_cast<std::int32_t>(t - b.begin);
        }
    }
    return ops::add(ops::gather_rows(params.block_embedding, block_ids),
                    ops::gather_rows(params.intra_sinusoid, offsets));
}

HeadOutput attention_head(const Tensor& x, const Tensor& w_q, const Tensor& w_k, const Tensor& w_v,
                          double tau, bool causal, double scale) {
    if (!(tau > 0.0)) throw ParameterError("temperature must be positive");
    const Tensor q = ops::matmul(x, w_q);
    const Tensor k = ops::matmul(x, w_k);
    const Tensor v = ops::matmul(x, w_v);
    Tensor scores = ops::matmul(q, ops::transpose(k));
    if (scale != 1.0) scores = ops::scale(scores, scale);
    Tensor attn = ops::softmax_rows(scores, tau, causal);
    return {ops::matmul(attn, v), attn};
}

Tensor offset_bias(const LayerParams& layer, std::size_t head, const BlockPartition& partition,
                   double margin) {
    const std::size_t n = partition.seq_len;
    Tensor same(Shape{n, n});
    for (const auto& b : partition.blocks) {
        for (std::size_t t = b.begin; t < b.end; ++t) {
            for (std::size_t j = b.begin; j < b.end; ++j) same.at(t, j) = margin;
        }
    }
    return ops::add(ops::matmul(layer.r_q[head], ops::transpose(layer.r_k[head])), same);
}

namespace {

void check_ids(std::span<const std::int32_t> ids, std::size_t vocab) {
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " +
                             std::to_string(vocab));
        }
    }
}

} // namespace

Tensor input_embeddings(const ModelParams& params, const ModelConfig& config,
                        const BlockPartition& partition, std::span<const std::int32_t> ids,
                        std::size_t batch) {
    if (partition.seq_len != config.seq_len) {
        throw ShapeError("partition covers " + std::to_string(partition.seq_len) +
                         " positions, model expects " + std::to_string(config.seq_len));
    }
    if (ids.size() != batch * config.seq_len) {
        throw ShapeError("expected " + std::to_string(batch * config.seq_len) + " ids, got " +
                         std::to_string(ids.size()));
    }
    check_ids(ids, config.vocab_size);
    return ops::add_tiled(ops::gather_rows(params.token_embedding, ids),
                          block_positional_encoding(params, partition));
}

Tensor attention_inputs(const ModelParams& params, const ModelConfig& config,
                        const BlockPartition& partition, std::span<const std::int32_t> ids,
                        std::size_t batch) {
    const auto& L = params.layers.front();
    return ops::layer_norm(input_embeddings(params, config, partition, ids, batch), L.ln1_gain,
                           L.ln1_bias);
}

ForwardResult forward(const ModelParams& params, const ModelConfig& config,
                      const BlockPartition& partition, std::span<const std::int32_t> ids,
                      std::size_t batch, const ForwardOptions& options) {
    return forward_embedded(params, config, partition,
                            input_embeddings(params, config, partition, ids, batch), batch, options);
}

ForwardResult forward_embedded(const ModelParams& params, const ModelConfig& config,
                               const BlockPartition& partition, const Tensor& x0, std::size_t batch,
                               const ForwardOptions& options) {
    const std::size_t n = config.seq_len;
    if (x0.rows() != batch * n || x0.cols() != config.d_model) {
        throw ShapeError("embedded input has shape " + shape_str(x0.shape()) + ", expected [" +
                         std::to_string(batch * n) + ", " + std::to_string(config.d_model) + "]");
    }
    const double tau = options.tau > 0.0 ? options.tau : config.tau;
    ForwardResult result;
    if (options.record) {
        result.records.assign(batch, AttentionRecord(n, config.n_layers, config.n_heads));
    }

    Tensor h = x0;
    std::vector<std::vector<double>> probs;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& L = params.layers[l];
        const Tensor a = ops::layer_norm(h, L.ln1_gain, L.ln1_bias);
        std::vector<Tensor> heads;
        for (std::size_t hd = 0; hd < config.n_heads; ++hd) {
            ops::AttentionOptions opts;
            opts.tau = tau;
            opts.scale = 1.0 / std::sqrt(static_cast<double>(config.d_head));
            Tensor bias;
            if (config.penalty_target == PenaltyTarget::offset) {
                bias = offset_bias(L, hd, partition, config.block_margin);
                opts.bias = &bias;
            }
            opts.probs_out = options.record ? &probs : nullptr;
            heads.push_back(ops::causal_attention(ops::matmul(a, L.w_q[hd]), ops::matmul(a, L.w_k[hd]),
                                                  ops::matmul(a, L.w_v[hd]), batch, n, opts));
            if (options.record) {
                for (std::size_t b = 0; b < batch; ++b) {
                    result.records[b].maps[l * config.n_heads + hd] = std::move(probs[b]);
                }
            }
        }
        h = ops::add(h, ops::matmul(ops::concat_cols(heads), L.w_o));
        const Tensor f = ops::layer_norm(h, L.ln2_gain, L.ln2_bias);
        const Tensor inner = ops::gelu(ops::add_bias(ops::matmul(f, L.w_ff1), L.b_ff1));
        h = ops::add(h, ops::add_bias(ops::matmul(inner, L.w_ff2), L.b_ff2));
    }
    const Tensor top = ops::layer_norm(h, params.lnf_gain, params.lnf_bias);
    result.logits = ops::add_bias(ops::matmul(top, params.w_out), params.b_out);
    return result;
}

json partition_to_json(const BlockPartition& p) {
    json blocks = json::array();
    for (const auto& b : p.blocks) {
        blocks.push_back({{"begin", b.begin}, {"end", b.end}, {"anchors", b.anchors},
                          {"weights", b.weights}});
    }
    return json{{"seq_len", p.seq_len}, {"window", p.window}, {"blocks", blocks}};
}

BlockPartition partition_from_json(const json& j) {
    BlockPartition p = make_partition(j.at("seq_len").get<std::size_t>(),
                                      j.at("window").get<std::size_t>());
    const auto& blocks = j.at("blocks");
    if (blocks.size() != p.count()) throw InputError("partition block count mismatch");
    for (std::size_t i = 0; i < p.count(); ++i) {
        p.blocks[i].anchors = blocks[i].at("anchors").get<std::vector<std::size_t>>();
        p.blocks[i].weights = blocks[i].at("weights").get<std::vector<double>>();
        if (p.blocks[i].anchors.size() != p.blocks[i].weights.size() ||
            p.blocks[i].anchors.empty()) {
            throw InputError("partition block " + std::to_string(i) + " has bad anchors");
        }
        for (auto a : p.blocks[i].anchors) {
            if (!p.blocks[i].contains(a)) throw InputError("anchor outside its block");
        }
    }
    return p;
}

namespace {

constexpr std::array<char, 8> kCkptMagic = {'L', 'T', 'C', 'K', 'P', 'T', '0', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(std::istream& in) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        const int c = in.get();
        if (c == EOF) throw IoError("truncated checkpoint header");
        v |= static_cast<std::uint32_t>(c & 0xFF) << (8 * i);
    }
    return v;
}

void put_f64(std::ostream& out, double x) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &x, sizeof bits);
    std::array<char, 8> b{};
    for (int i = 0; i < 8; ++i) b[static_cast<std::size_t>(i)] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    out.write(b.data(), 8);
}

double get_f64(std::istream& in) {
    std::array<unsigned char, 8> b{};
    in.read(reinterpret_cast<char*>(b.data()), 8);
    if (!in) throw IoError("truncated checkpoint payload");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t{b[static_cast<std::size_t>(i)]} << (8 * i);
    double x = 0.0;
    std::memcpy(&x, &bits, sizeof x);
    return x;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const json header{{"config", ckpt.config},
                      {"partition", partition_to_json(ckpt.partition)},
                      {"meta", ckpt.meta}};
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(kCkptMagic.data(), kCkptMagic.size());
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : ckpt.params.named()) {
        for (double x : t.values()) put_f64(out, x);
    }
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kCkptMagic) throw IoError("bad checkpoint magic in " + path.string());
    const std::uint32_t len = get_u32(in);
    std::string text(len, '\0');
    in.read(text.data(), len);
    if (!in) throw IoError("truncated checkpoint header in " + path.string());
    const json header = json::parse(text);

    Checkpoint ckpt;
    ckpt.config = header.at("config").get<ModelConfig>();
    ckpt.partition = partition_from_json(header.at("partition"));
    ckpt.meta = header.value("meta", json::object());
    ckpt.params = init_params(ckpt.config, 0);
    for (auto& [name, t] : ckpt.params.named()) {
        Tensor target = t;
        for (auto& x : target.mutable_values()) x = get_f64(in);
    }
    if (in.peek() != EOF) throw IoError("trailing bytes in checkpoint " + path.string());
    return ckpt;
}

} // namespace loctrans
