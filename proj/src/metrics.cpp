#include "loctrans/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

#include "loctrans/error.hpp"
#include "loctrans/log.hpp"

namespace loctrans {

double attention_entropy(std::span<const double> row) {
    double total = 0.0;
    for (double a : row) {
        if (!(a >= 0.0)) throw InputError("attention row has a negative or NaN entry");
        total += a;
    }
    if (std::abs(total - 1.0) > 1e-6) {
        throw InputError("attention row sums to " + std::to_string(total) + ", not 1");
    }
    double h = 0.0;
    for (double a : row) {
        if (a > 0.0) h -= a * std::log2(a);
    }
    return std::max(0.0, h);
}

std::vector<std::vector<double>> anchor_weights(std::span<const AttentionRecord> records,
                                                const BlockPartition& partition) {
    const std::size_t n = partition.seq_len;
    std::vector<std::vector<double>> out;
    out.reserve(partition.count());
    for (const auto& block : partition.blocks) out.emplace_back(block.anchors.size(), 0.0);

    for (const auto& rec : records) {
        if (rec.seq_len != n) throw ShapeError("attention record and partition disagree on N");
        for (const auto& m : rec.maps) {
            for (std::size_t i = 0; i < partition.count(); ++i) {
                const auto& block = partition.blocks[i];
                for (std::size_t a = 0; a < block.anchors.size(); ++a) {
                    const std::size_t j = block.anchors[a];
                    double s = 0.0;
                    for (std::size_t t = block.begin; t < block.end; ++t) s += m[t * n + j];
                    out[i][a] += s / static_cast<double>(block.size());
                }
            }
        }
    }
    for (auto& w : out) {
        double total = 0.0;
        for (double v : w) total += v;
        if (total > 0.0) {
            for (double& v : w) v /= total;
        } else if (!w.empty()) {
            std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(w.size()));
        }
    }
    return out;
}

std::vector<std::vector<double>> anchor_weights(const AttentionRecord& record,
                                                const BlockPartition& partition) {
    return anchor_weights(std::span<const AttentionRecord>(&record, 1), partition);
}

std::vector<std::vector<std::size_t>> anchor_targets(const BlockPartition& partition) {
    std::vector<std::vector<std::size_t>> targets(partition.seq_len);
    for (const auto& block : partition.blocks) {
        for (std::size_t t = block.begin; t < block.end; ++t) targets[t] = block.anchors;
    }
    return targets;
}

std::vector<double> position_weights(const BlockPartition& partition) {
    std::vector<double> w(partition.seq_len, 0.0);
    for (const auto& block : partition.blocks) {
        for (std::size_t a = 0; a < block.anchors.size(); ++a) {
            w[block.anchors[a]] = block.weights[a];
        }
    }
    return w;
}

Fidelity pointer_fidelity(std::span<const double> attn, const BlockPartition& partition,
                          const std::vector<std::vector<std::size_t>>& targets,
                          std::optional<std::span<const double>> weights) {
    const std::size_t n = partition.seq_len;
    if (attn.size() != n * n) throw ShapeError("attention map is not [N, N] for the partition");
    if (targets.size() != n) throw ShapeError("need one target set per query position");
    if (weights && weights->size() != n) throw ShapeError("need one weight per position");

    Fidelity f;
    double unweighted = 0.0;
    for (const auto& block : partition.blocks) {
        double block_sum = 0.0;
        std::size_t block_queries = 0;
        for (std::size_t t = block.begin; t < block.end; ++t) {
            if (targets[t].empty()) {
                ++f.skipped;
                continue;
            }
            double mass = 0.0;
            double wmass = 0.0;
            for (std::size_t j : targets[t]) {
                if (j >= n) throw IndexError("target position outside the sequence");
                mass += attn[t * n + j];
                if (weights) wmass += (*weights)[j] * attn[t * n + j];
            }
            unweighted += mass;
            block_sum += wmass;
            ++block_queries;
        }
        f.queries += block_queries;
        if (block_queries) f.weighted += block_sum / static_cast<double>(block_queries);
    }
    if (f.skipped) log_warn(std::to_string(f.skipped) + " queries had no target positions");
    if (f.queries) f.unweighted = unweighted / static_cast<double>(f.queries);
    if (!weights) f.weighted = 0.0;
    return f;
}

double cross_block_mass(std::span<const double> attn, const BlockPartition& partition) {
    const std::size_t n = partition.seq_len;
    if (attn.size() != n * n) throw ShapeError("attention map is not [N, N] for the partition");
    double total = 0.0;
    for (const auto& block : partition.blocks) {
        for (std::size_t t = block.begin; t < block.end; ++t) {
            double inside = 0.0;
            double all = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                all += attn[t * n + j];
                if (block.contains(j)) inside += attn[t * n + j];
            }
            total += all - inside;
        }
    }
    return total / static_cast<double>(n);
}

double perplexity(double mean_loss) {
    if (!std::isfinite(mean_loss)) throw InputError("perplexity of a non-finite loss");
    return std::exp(mean_loss);
}

double accuracy(std::span<const double> logits, std::size_t vocab,
                std::span<const std::int32_t> targets) {
    if (vocab == 0 || logits.size() != vocab * targets.size()) {
        throw ShapeError("logits do not match targets x vocabulary");
    }
    if (targets.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < targets.size(); ++r) {
        const auto row = logits.subspan(r * vocab, vocab);
        const auto best = std::max_element(row.begin(), row.end()) - row.begin();
        if (best == targets[r]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(targets.size());
}

InterpStats interpretability_stats(std::span<const AttentionRecord> records,
                                   const BlockPartition& partition, std::size_t max_queries) {
    const std::size_t n = partition.seq_len;
    const auto targets = anchor_targets(partition);
    const auto weights = position_weights(partition);
    InterpStats s;
    double h_sum = 0.0, ceil_sum = 0.0, uw_sum = 0.0, w_sum = 0.0, cross_sum = 0.0;
    std::size_t h_count = 0;
    std::size_t scored = 0; // (map, query) pairs
    std::size_t budget = max_queries ? max_queries : records.size() * n;

    for (const auto& rec : records) {
        if (budget == 0) break;
        if (rec.seq_len != n) throw ShapeError("attention record and partition disagree on N");
        const std::size_t use = std::min(budget, n);
        budget -= use;
        s.queries += use;

        for (const auto& m : rec.maps) {
            for (std::size_t t = 1; t < use; ++t) {
                h_sum += attention_entropy(std::span<const double>(m).subspan(t * n, n));
                ceil_sum += std::log2(static_cast<double>(t + 1));
                ++h_count;
            }
            double uw = 0.0, cross = 0.0, w = 0.0;
            std::vector<std::size_t> per_block(partition.count(), 0);
            std::vector<double> block_w(partition.count(), 0.0);
            for (std::size_t t = 0; t < use; ++t) {
                const std::size_t b = partition.block_of(t);
                const auto& block = partition.blocks[b];
                double in_block = 0.0;
                for (std::size_t j = block.begin; j < block.end; ++j) in_block += m[t * n + j];
                cross += 1.0 - in_block;
                double mass = 0.0, wmass = 0.0;
                for (std::size_t j : targets[t]) {
                    mass += m[t * n + j];
                    wmass += weights[j] * m[t * n + j];
                }
                uw += mass;
                block_w[b] += wmass;
                ++per_block[b];
            }
            std::size_t present = 0;
            for (std::size_t b = 0; b < partition.count(); ++b) {
                if (!per_block[b]) continue;
                w += block_w[b] / static_cast<double>(per_block[b]);
                ++present;
            }
            // A truncated window covers fewer blocks; its block sum is scaled
            // to the full block count so every query carries equal weight.
            w *= static_cast<double>(partition.count()) / static_cast<double>(present);
            uw_sum += uw;
            cross_sum += cross;
            w_sum += w * static_cast<double>(use);
            scored += use;
        }
    }
    if (scored == 0) throw InputError("no attention queries to score");
    s.entropy_bits = h_count ? h_sum / static_cast<double>(h_count) : 0.0;
    s.entropy_ceiling_bits = h_count ? ceil_sum / static_cast<double>(h_count) : 0.0;
    s.unweighted_fidelity = uw_sum / static_cast<double>(scored);
    s.weighted_fidelity = w_sum / static_cast<double>(scored);
    s.cross_block_mass = cross_sum / static_cast<double>(scored);
    return s;
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        throw InputError("bad number '" + s + "' in CSV");
    }
    if (used != s.size()) throw InputError("bad number '" + s + "' in CSV");
    return v;
}

template <typename Row, typename Parse>
std::vector<Row> read_csv(std::istream& in, const char* header, std::size_t columns, Parse parse) {
    std::string line;
    if (!std::getline(in, line) || line != header) {
        throw InputError(std::string("CSV header mismatch, expected: ") + header);
    }
    std::vector<Row> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split_csv(line);
        if (cells.size() != columns) throw InputError("CSV row has wrong column count: " + line);
        rows.push_back(parse(cells));
    }
    return rows;
}

} // namespace

void write_metrics_csv(std::ostream& out, std::span<const MetricsRow> rows) {
    out << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        out << fmt(r.lambda) << ',' << r.split << ',' << fmt(r.entropy_bits) << ','
            << fmt(r.entropy_std) << ',' << fmt(r.weighted_fidelity) << ','
            << fmt(r.weighted_fidelity_std) << ',' << fmt(r.unweighted_fidelity) << ','
            << fmt(r.cross_block_mass) << '\n';
    }
}

std::vector<MetricsRow> read_metrics_csv(std::istream& in) {
    return read_csv<MetricsRow>(in, kMetricsHeader, 8, [](const std::vector<std::string>& c) {
        MetricsRow r;
        r.lambda = parse_double(c[0]);
        r.split = c[1];
        r.entropy_bits = parse_double(c[2]);
        r.entropy_std = parse_double(c[3]);
        r.weighted_fidelity = parse_double(c[4]);
        r.weighted_fidelity_std = parse_double(c[5]);
        r.unweighted_fidelity = parse_double(c[6]);
        r.cross_block_mass = parse_double(c[7]);
        return r;
    });
}

void write_perf_csv(std::ostream& out, std::span<const PerfRow> rows) {
    out << kPerfHeader << '\n';
    for (const auto& r : rows) {
        out << fmt(r.lambda) << ',' << fmt(r.loss) << ',' << fmt(r.loss_std) << ','
            << fmt(r.accuracy) << ',' << fmt(r.accuracy_std) << ',' << fmt(r.perplexity) << ','
            << fmt(r.perplexity_std) << ',' << fmt(r.epochs) << '\n';
    }
}

std::vector<PerfRow> read_perf_csv(std::istream& in) {
    return read_csv<PerfRow>(in, kPerfHeader, 8, [](const std::vector<std::string>& c) {
        PerfRow r;
        r.lambda = parse_double(c[0]);
        r.loss = parse_double(c[1]);
        r.loss_std = parse_double(c[2]);
        r.accuracy = parse_double(c[3]);
        r.accuracy_std = parse_double(c[4]);
        r.perplexity = parse_double(c[5]);
        r.perplexity_std = parse_double(c[6]);
        r.epochs = parse_double(c[7]);
        return r;
    });
}

MeanStd mean_std(std::span<const double> values) {
    MeanStd out;
    if (values.empty()) return out;
    double s = 0.0;
    for (double v : values) s += v;
    out.mean = s / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - out.mean) * (v - out.mean);
        out.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return out;
}

} // namespace loctrans
