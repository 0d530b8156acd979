#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "spes/model.hpp"

namespace spes {

// Which expert matrix acts as the "input projection" for similarity.
enum class SimilaritySource { Gate, Up, Concat };

struct MergeSchedule {
    int warmup_rounds = 0;    // T_merge; merging only for t < warmup_rounds
    int interval = 1;         // rounds between merges
    double alpha0 = 0.1;
    int peers = 4;            // K
    SimilaritySource source = SimilaritySource::Gate;

    bool merge_at(int round) const {
        return warmup_rounds > 0 && round < warmup_rounds && interval > 0 &&
               round % interval == 0;
    }
};

// alpha_t = alpha0 * max(0, 1 - t / T_merge)
inline double alpha_at(const MergeSchedule& s, int round) {
    if (round < 0) throw std::invalid_argument("alpha_at: negative round");
    if (s.warmup_rounds <= 0) return 0.0;
    double frac = 1.0 - static_cast<double>(round) / static_cast<double>(s.warmup_rounds);
    return s.alpha0 * std::max(0.0, frac);
}

struct SimilarityMatrix {
    int experts = 0;
    std::vector<double> a;  // M x M row-major
    double at(int j, int k) const { return a[static_cast<size_t>(j * experts + k)]; }
};

namespace detail {
inline std::vector<double> projection_vector(const ExpertParams& e, SimilaritySource src) {
    std::vector<double> w;
    auto append = [&](const Tensor& t) {
        for (float v : t.data) w.push_back(static_cast<double>(v));
    };
    if (src == SimilaritySource::Gate || src == SimilaritySource::Concat) append(e.wg);
    if (src == SimilaritySource::Up || src == SimilaritySource::Concat) append(e.wu);
    return w;
}
}  // namespace detail

// Pairwise cosine similarities between input-projection weights of one
// layer's experts. A zero-norm projection gets similarity 0 with everyone.
inline SimilarityMatrix similarity_matrix(const std::vector<ExpertParams>& layer,
                                          SimilaritySource src = SimilaritySource::Gate) {
    int m = static_cast<int>(layer.size());
    if (m < 2) throw std::invalid_argument("similarity_matrix: need M >= 2");
    std::vector<std::vector<double>> w;
    std::vector<double> norm;
    for (const auto& e : layer) {
        w.push_back(detail::projection_vector(e, src));
        double n2 = 0.0;
        for (double v : w.back()) n2 += v * v;
        norm.push_back(std::sqrt(n2));
    }
    SimilarityMatrix sim;
    sim.experts = m;
    sim.a.assign(static_cast<size_t>(m) * m, 0.0);
    for (int j = 0; j < m; ++j)
        for (int k = j; k < m; ++k) {
            double v = 0.0;
            if (norm[j] > 0.0 && norm[k] > 0.0) {
                double dot = 0.0;
                for (size_t i = 0; i < w[j].size(); ++i) dot += w[j][i] * w[k][i];
                v = dot / (norm[j] * norm[k]);
            }
            sim.a[static_cast<size_t>(j * m + k)] = v;
            sim.a[static_cast<size_t>(k * m + j)] = v;
        }
    return sim;
}

// Top-K peers of expert j by similarity, self excluded, ties by lowest index.
inline std::vector<int> select_peers(const SimilarityMatrix& sim, int j, int k) {
    if (k < 1) throw std::invalid_argument("select_peers: need K >= 1");
    std::vector<int> idx;
    for (int i = 0; i < sim.experts; ++i)
        if (i != j) idx.push_back(i);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return sim.at(j, a) > sim.at(j, b); });
    if (static_cast<int>(idx.size()) > k) idx.resize(static_cast<size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

struct MergeEvent {
    int layer = 0;
    double alpha = 0.0;
    double displacement_sq = 0.0;  // ||Delta_merge||^2 for this layer
    std::vector<std::vector<int>> peer_sets;  // per expert
};

// Task-arithmetic merge of one layer, computed simultaneously from a frozen
// pre-merge snapshot: phi_j <- phi_j + alpha/K * sum_{k in Q_j}(phi_k - phi_j).
inline MergeEvent merge_experts(std::vector<ExpertParams>& layer, const MergeSchedule& sched,
                                double alpha) {
    int m = static_cast<int>(layer.size());
    MergeEvent ev;
    ev.alpha = alpha;
    SimilarityMatrix sim = similarity_matrix(layer, sched.source);
    int k = std::min(sched.peers, m - 1);
    const std::vector<ExpertParams> snapshot = layer;
    for (int j = 0; j < m; ++j) {
        auto peers = select_peers(sim, j, k);
        ev.peer_sets.push_back(peers);
        double coef = alpha / static_cast<double>(peers.size());
        auto merge_tensor = [&](Tensor& dst, const Tensor ExpertParams::*member) {
            const Tensor& self = snapshot[static_cast<size_t>(j)].*member;
            for (size_t i = 0; i < dst.data.size(); ++i) {
                double acc = 0.0;
                for (int p : peers)
                    acc += static_cast<double>((snapshot[static_cast<size_t>(p)].*member).data[i]) -
                           static_cast<double>(self.data[i]);
                double delta = coef * acc;
                ev.displacement_sq += delta * delta;
                dst.data[i] = static_cast<float>(static_cast<double>(self.data[i]) + delta);
            }
        };
        merge_tensor(layer[static_cast<size_t>(j)].wg, &ExpertParams::wg);
        merge_tensor(layer[static_cast<size_t>(j)].wu, &ExpertParams::wu);
        merge_tensor(layer[static_cast<size_t>(j)].wd, &ExpertParams::wd);
    }
    return ev;
}

// Server-side merge hook across all layers; returns one event per layer.
inline std::vector<MergeEvent> merge_model(ModelParams& params, const MergeSchedule& sched,
                                           int round) {
    std::vector<MergeEvent> events;
    if (!sched.merge_at(round)) return events;
    double alpha = alpha_at(sched, round);
    if (alpha <= 0.0) return events;
    for (size_t l = 0; l < params.experts.size(); ++l) {
        MergeEvent ev = merge_experts(params.experts[l], sched, alpha);
        ev.layer = static_cast<int>(l);
        events.push_back(std::move(ev));
    }
    return events;
}

}  // namespace spes
