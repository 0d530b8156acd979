#include "spes/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace spes {

namespace {

MarkovSource make_source(int64_t vocab, int source_index, int sources, double skew,
                         std::mt19937_64& rng) {
    MarkovSource s;
    s.vocab = vocab;
    s.transition.assign(static_cast<size_t>(vocab * vocab), 0.0);
    s.initial.assign(static_cast<size_t>(vocab), 1.0 / static_cast<double>(vocab));
    std::normal_distribution<double> noise(0.0, 1.0);
    int64_t band = vocab / sources;
    for (int64_t i = 0; i < vocab; ++i) {
        double total = 0.0;
        for (int64_t j = 0; j < vocab; ++j) {
            double w = std::exp(0.5 * noise(rng));
            // Source-specific preferred successor makes sources distinguishable.
            if (j == (i + source_index + 1) % vocab) w *= 8.0;
            // Optional unigram separation: each source favors its own band.
            if (skew > 0.0 && band > 0 && j / band == source_index) w *= 1.0 + skew;
            s.transition[static_cast<size_t>(i * vocab + j)] = w;
            total += w;
        }
        for (int64_t j = 0; j < vocab; ++j)
            s.transition[static_cast<size_t>(i * vocab + j)] /= total;
    }
    return s;
}

int64_t sample_from(const double* probs, int64_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double r = u(rng), acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        acc += probs[i];
        if (r < acc) return i;
    }
    return n - 1;
}

}  // namespace

SyntheticCorpus gen_corpus(int64_t vocab, int64_t seq, int sources, int64_t sequences,
                           uint64_t seed, double skew) {
    if (sources < 1 || vocab < sources)
        throw std::invalid_argument("gen_corpus: need V >= C >= 1");
    if (seq < 1 || sequences < 1)
        throw std::invalid_argument("gen_corpus: need positive sequence length and count");
    if (skew < 0.0) throw std::invalid_argument("gen_corpus: skew must be non-negative");
    std::mt19937_64 rng(seed);
    SyntheticCorpus c;
    c.vocab = vocab;
    c.seq = seq;
    for (int s = 0; s < sources; ++s)
        c.sources.push_back(make_source(vocab, s, sources, skew, rng));
    c.tokens.reserve(static_cast<size_t>(sequences * (seq + 1)));
    for (int64_t r = 0; r < sequences; ++r) {
        int src = static_cast<int>(r % sources);  // balanced mixture
        c.source_id.push_back(src);
        const MarkovSource& m = c.sources[static_cast<size_t>(src)];
        int64_t tok = sample_from(m.initial.data(), vocab, rng);
        c.tokens.push_back(static_cast<int32_t>(tok));
        for (int64_t p = 0; p < seq; ++p) {
            tok = sample_from(&m.transition[static_cast<size_t>(tok * vocab)], vocab, rng);
            c.tokens.push_back(static_cast<int32_t>(tok));
        }
    }
    return c;
}

Batch SyntheticCorpus::make_batch(const std::vector<int64_t>& rows) const {
    Batch b;
    b.batch = static_cast<int64_t>(rows.size());
    b.seq = seq;
    for (int64_t r : rows)
        for (int64_t p = 0; p <= seq; ++p) b.tokens.push_back(at(r, p));
    return b;
}

std::vector<double> stationary_distribution(const MarkovSource& src, int iters) {
    int64_t v = src.vocab;
    std::vector<double> pi(static_cast<size_t>(v), 1.0 / static_cast<double>(v));
    std::vector<double> next(static_cast<size_t>(v));
    for (int it = 0; it < iters; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        for (int64_t i = 0; i < v; ++i)
            for (int64_t j = 0; j < v; ++j)
                next[static_cast<size_t>(j)] += pi[static_cast<size_t>(i)] * src.p(i, j);
        double diff = 0;
        for (int64_t j = 0; j < v; ++j)
            diff += std::abs(next[static_cast<size_t>(j)] - pi[static_cast<size_t>(j)]);
        pi.swap(next);
        if (diff < 1e-13) break;
    }
    return pi;
}

std::vector<std::vector<int64_t>> shard_corpus(const SyntheticCorpus& corpus, int nodes,
                                               ShardPolicy policy, uint64_t seed) {
    if (nodes < 1) throw std::invalid_argument("shard_corpus: need nodes >= 1");
    int64_t n = corpus.sequences();
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), int64_t{0});
    std::mt19937_64 rng(seed);
    if (policy == ShardPolicy::Random) {
        std::shuffle(order.begin(), order.end(), rng);
    } else {
        // Group sequences by source so shards are maximally heterogeneous.
        std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            return corpus.source_id[static_cast<size_t>(a)] <
                   corpus.source_id[static_cast<size_t>(b)];
        });
    }
    std::vector<std::vector<int64_t>> shards(static_cast<size_t>(nodes));
    int64_t base = n / nodes, extra = n % nodes, next = 0;
    for (int i = 0; i < nodes; ++i) {
        int64_t take = base + (i < extra ? 1 : 0);
        for (int64_t j = 0; j < take; ++j)
            shards[static_cast<size_t>(i)].push_back(order[static_cast<size_t>(next++)]);
    }
    return shards;
}

BatchProvider make_batch_provider(const SyntheticCorpus& corpus, std::vector<int64_t> shard,
                                  int64_t batch_size, uint64_t seed) {
    if (shard.empty()) throw std::invalid_argument("batch provider: empty shard");
    if (batch_size < 1) throw std::invalid_argument("batch provider: need batch >= 1");
    auto state = std::make_shared<std::pair<std::mt19937_64, size_t>>(std::mt19937_64(seed),
                                                                      shard.size());
    auto order = std::make_shared<std::vector<int64_t>>(std::move(shard));
    auto data = std::make_shared<SyntheticCorpus>(corpus);  // own a copy; providers may outlive
    return [data, batch_size, state, order]() {
        std::vector<int64_t> rows;
        for (int64_t i = 0; i < batch_size; ++i) {
            if (state->second >= order->size()) {
                std::shuffle(order->begin(), order->end(), state->first);
                state->second = 0;
            }
            rows.push_back((*order)[state->second++]);
        }
        return data->make_batch(rows);
    };
}

}  // namespace spes
