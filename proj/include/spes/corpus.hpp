#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "spes/trainer.hpp"

namespace spes {

// One first-order Markov source over the shared vocabulary.
struct MarkovSource {
    int64_t vocab = 0;
    std::vector<double> transition;  // V x V, row-stochastic
    std::vector<double> initial;     // length V

    double p(int64_t from, int64_t to) const {
        return transition[static_cast<size_t>(from * vocab + to)];
    }
};

// Deterministic mixture-of-Markov-chains corpus; each sequence carries its
// latent source id for specialization analysis.
struct SyntheticCorpus {
    int64_t vocab = 0;
    int64_t seq = 0;  // S; each row stores S+1 tokens
    std::vector<MarkovSource> sources;
    std::vector<int32_t> tokens;  // sequences * (seq+1), row-major
    std::vector<int> source_id;   // per sequence

    int64_t sequences() const {
        return static_cast<int64_t>(tokens.size()) / (seq + 1);
    }
    int32_t at(int64_t row, int64_t pos) const {
        return tokens[static_cast<size_t>(row * (seq + 1) + pos)];
    }
    // Batch assembled from the given sequence rows.
    Batch make_batch(const std::vector<int64_t>& rows) const;
};

// skew > 0 additionally biases each source toward its own contiguous token
// band, separating the sources' unigram statistics; 0 keeps only the
// successor-shift difference (near-identical token marginals).
SyntheticCorpus gen_corpus(int64_t vocab, int64_t seq, int sources, int64_t sequences,
                           uint64_t seed, double skew = 0.0);

// Stationary distribution of one source (power iteration).
std::vector<double> stationary_distribution(const MarkovSource& src, int iters = 2000);

enum class ShardPolicy { Random, BySource };

// Disjoint per-node sequence index sets covering the corpus. BySource keeps
// each source's sequences on as few nodes as possible (heterogeneous shards).
std::vector<std::vector<int64_t>> shard_corpus(const SyntheticCorpus& corpus, int nodes,
                                               ShardPolicy policy, uint64_t seed);

// Deterministic batch stream over one shard: shuffled epochs, wrap-around.
BatchProvider make_batch_provider(const SyntheticCorpus& corpus, std::vector<int64_t> shard,
                                  int64_t batch_size, uint64_t seed);

}  // namespace spes
