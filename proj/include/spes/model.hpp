#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "spes/graph.hpp"
#include "spes/tensor.hpp"

namespace spes {

struct LossCoeffs {
    double ce = 1.0;
    double lb = 0.01;
    double moe_z = 0.001;
    double z = 1e-5;
};

struct ModelConfig {
    int64_t vocab = 64;
    int64_t hidden = 32;
    int64_t intermediate = 64;
    int layers = 2;
    int experts_total = 4;
    int experts_active = 2;
    bool renormalize_after_topk = false;
    bool tied_head = false;
    LossCoeffs loss;
    float rms_eps = 1e-5f;

    void validate() const {
        if (vocab < 1 || hidden < 1 || intermediate < 1 || layers < 1)
            throw std::invalid_argument("model config: all dims must be >= 1");
        if (experts_active < 1 || experts_active > experts_total)
            throw std::invalid_argument("model config: need 1 <= k <= M");
        if (loss.ce < 0 || loss.lb < 0 || loss.moe_z < 0 || loss.z < 0)
            throw std::invalid_argument("model config: loss coefficients must be >= 0");
    }
};

template <typename T>
struct ExpertParamsT {
    TensorT<T> wg, wu, wd;  // d x f, d x f, f x d
};

template <typename T>
struct SharedParamsT {
    TensorT<T> embedding;                  // V x d
    std::vector<TensorT<T>> norm_gain;     // L of [d]
    std::vector<TensorT<T>> router;        // L of d x M
    TensorT<T> head;                       // d x V (absent when tied)
};

template <typename T>
struct ModelParamsT {
    ModelConfig config;
    SharedParamsT<T> shared;
    std::vector<std::vector<ExpertParamsT<T>>> experts;  // [L][M]

    template <typename U>
    ModelParamsT<U> cast() const {
        ModelParamsT<U> out;
        out.config = config;
        out.shared.embedding = shared.embedding.template cast<U>();
        for (const auto& t : shared.norm_gain) out.shared.norm_gain.push_back(t.template cast<U>());
        for (const auto& t : shared.router) out.shared.router.push_back(t.template cast<U>());
        if (!config.tied_head) out.shared.head = shared.head.template cast<U>();
        out.experts.resize(experts.size());
        for (size_t l = 0; l < experts.size(); ++l)
            for (const auto& e : experts[l])
                out.experts[l].push_back({e.wg.template cast<U>(), e.wu.template cast<U>(),
                                          e.wd.template cast<U>()});
        return out;
    }
};

using ExpertParams = ExpertParamsT<float>;
using SharedParams = SharedParamsT<float>;
using ModelParams = ModelParamsT<float>;

// ---- parameter-block bookkeeping ----
// Every parameter tensor has a stable name; the shared/expert partition is
// total and disjoint by construction.

struct BlockDesc {
    std::string name;
    std::vector<int64_t> shape;
    int layer = -1;    // -1 for embedding/head
    int expert = -1;   // -1 for shared blocks
    bool is_expert() const { return expert >= 0; }
};

inline std::vector<BlockDesc> enumerate_blocks(const ModelConfig& c) {
    std::vector<BlockDesc> out;
    out.push_back({"psi.emb", {c.vocab, c.hidden}, -1, -1});
    if (!c.tied_head) out.push_back({"psi.head", {c.hidden, c.vocab}, -1, -1});
    for (int l = 0; l < c.layers; ++l) {
        out.push_back({"psi.norm." + std::to_string(l), {c.hidden}, l, -1});
        out.push_back({"psi.router." + std::to_string(l), {c.hidden, c.experts_total}, l, -1});
    }
    for (int l = 0; l < c.layers; ++l)
        for (int j = 0; j < c.experts_total; ++j) {
            std::string base = "e." + std::to_string(l) + "." + std::to_string(j) + ".";
            out.push_back({base + "wg", {c.hidden, c.intermediate}, l, j});
            out.push_back({base + "wu", {c.hidden, c.intermediate}, l, j});
            out.push_back({base + "wd", {c.intermediate, c.hidden}, l, j});
        }
    return out;
}

template <typename T>
TensorT<T>& block_tensor(ModelParamsT<T>& p, const BlockDesc& b) {
    if (b.expert >= 0) {
        auto& e = p.experts.at(static_cast<size_t>(b.layer)).at(static_cast<size_t>(b.expert));
        char which = b.name[b.name.size() - 1];  // wg/wu/wd -> 'g'/'u'/'d'
        return which == 'g' ? e.wg : (which == 'u' ? e.wu : e.wd);
    }
    if (b.name == "psi.emb") return p.shared.embedding;
    if (b.name == "psi.head") return p.shared.head;
    if (b.name.rfind("psi.norm.", 0) == 0)
        return p.shared.norm_gain.at(static_cast<size_t>(b.layer));
    return p.shared.router.at(static_cast<size_t>(b.layer));
}

template <typename T>
const TensorT<T>& block_tensor(const ModelParamsT<T>& p, const BlockDesc& b) {
    return block_tensor(const_cast<ModelParamsT<T>&>(p), b);
}

struct ParamCounts {
    int64_t shared = 0;        // |psi|
    int64_t experts_total = 0; // |Phi|
    int64_t per_expert = 0;    // 3*d*f per (layer, expert) summed over layers
};

inline ParamCounts param_counts(const ModelConfig& c) {
    ParamCounts pc;
    for (const auto& b : enumerate_blocks(c)) {
        int64_t n = Tensor::numel_of(b.shape);
        if (b.is_expert())
            pc.experts_total += n;
        else
            pc.shared += n;
    }
    pc.per_expert = 3 * c.hidden * c.intermediate * c.layers;
    return pc;
}

// ---- construction ----

template <typename T>
ModelParamsT<T> init_model(const ModelConfig& c, uint64_t seed, double init_std = 0.02) {
    c.validate();
    std::mt19937_64 rng(seed);
    ModelParamsT<T> p;
    p.config = c;
    p.shared.embedding = TensorT<T>::randn({c.vocab, c.hidden}, rng, init_std);
    for (int l = 0; l < c.layers; ++l) {
        p.shared.norm_gain.push_back(TensorT<T>::full({c.hidden}, T(1)));
        p.shared.router.push_back(TensorT<T>::randn({c.hidden, c.experts_total}, rng, init_std));
    }
    if (!c.tied_head) p.shared.head = TensorT<T>::randn({c.hidden, c.vocab}, rng, init_std);
    p.experts.resize(static_cast<size_t>(c.layers));
    for (int l = 0; l < c.layers; ++l)
        for (int j = 0; j < c.experts_total; ++j)
            p.experts[static_cast<size_t>(l)].push_back(
                {TensorT<T>::randn({c.hidden, c.intermediate}, rng, init_std),
                 TensorT<T>::randn({c.hidden, c.intermediate}, rng, init_std),
                 TensorT<T>::randn({c.intermediate, c.hidden}, rng, init_std)});
    return p;
}

// ---- routing ----

struct RoutingDecision {
    int top_k = 0;
    Tensor logits;                                  // T x M
    Tensor probs;                                   // T x M, full softmax
    std::vector<std::vector<int32_t>> selected;     // per token, k distinct indices
    std::vector<std::vector<float>> weights;        // per token, aligned with selected
};

// Top-k by probability, ties broken by lowest expert index.
template <typename T>
RoutingDecision route_from_logits(const TensorT<T>& logits, int k, bool renormalize) {
    int64_t tokens = logits.rows(), m = logits.cols();
    if (k < 1 || k > m) throw std::invalid_argument("route: need 1 <= k <= M");
    RoutingDecision rd;
    rd.top_k = k;
    rd.logits = logits.template cast<float>();
    TensorT<T> probs = TensorT<T>::zeros(logits.shape);
    kernels::softmax_rows(logits.data.data(), probs.data.data(), tokens, m);
    rd.probs = probs.template cast<float>();
    rd.selected.resize(static_cast<size_t>(tokens));
    rd.weights.resize(static_cast<size_t>(tokens));
    for (int64_t t = 0; t < tokens; ++t) {
        std::vector<int32_t> idx(static_cast<size_t>(m));
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int32_t a, int32_t b) {
            return probs.at(t, a) > probs.at(t, b);  // stable sort keeps lowest index on ties
        });
        idx.resize(static_cast<size_t>(k));
        std::sort(idx.begin(), idx.end());
        T denom = T(0);
        for (int32_t j : idx) denom += probs.at(t, j);
        for (int32_t j : idx) {
            T w = probs.at(t, j);
            if (renormalize) w /= denom;
            rd.selected[static_cast<size_t>(t)].push_back(j);
            rd.weights[static_cast<size_t>(t)].push_back(static_cast<float>(w));
        }
    }
    return rd;
}

template <typename T>
RoutingDecision route(const ModelParamsT<T>& p, const TensorT<T>& h, int layer) {
    if (layer < 0 || layer >= p.config.layers) throw std::out_of_range("route: bad layer");
    const auto& R = p.shared.router[static_cast<size_t>(layer)];
    TensorT<T> logits = TensorT<T>::zeros({h.rows(), R.cols()});
    kernels::matmul(h.data.data(), R.data.data(), logits.data.data(), h.rows(), h.cols(), R.cols());
    return route_from_logits(logits, p.config.experts_active, p.config.renormalize_after_topk);
}

// ---- loss graph ----

struct Batch {
    int64_t batch = 0;
    int64_t seq = 0;                // S; rows carry S+1 tokens
    std::vector<int32_t> tokens;    // B * (S+1), row-major

    int32_t at(int64_t b, int64_t s) const {
        return tokens[static_cast<size_t>(b * (seq + 1) + s)];
    }
};

using TrainablePredicate = std::function<bool(const BlockDesc&)>;

template <typename T>
struct LossGraphT {
    GraphT<T> g;
    typename GraphT<T>::NodeId total, ce, lb, moe_z, z;
    // Leaf id per block, aligned with enumerate_blocks(config).
    std::vector<typename GraphT<T>::NodeId> block_leaves;
    std::vector<RoutingDecision> routing;  // per layer
    int64_t expert_evaluations = 0;        // dropless check: must equal tokens * k * L
};

template <typename T>
LossGraphT<T> build_loss(const ModelParamsT<T>& p, const Batch& batch,
                         const TrainablePredicate& trainable = nullptr) {
    using NodeId = typename GraphT<T>::NodeId;
    const ModelConfig& c = p.config;
    const auto blocks = enumerate_blocks(c);

    LossGraphT<T> lg;
    GraphT<T>& g = lg.g;

    std::vector<NodeId> leaf(blocks.size());
    for (size_t i = 0; i < blocks.size(); ++i) {
        bool req = trainable ? trainable(blocks[i]) : true;
        leaf[i] = g.leaf(block_tensor(p, blocks[i]), req);
    }
    lg.block_leaves = leaf;
    auto find_leaf = [&](const std::string& name) -> NodeId {
        for (size_t i = 0; i < blocks.size(); ++i)
            if (blocks[i].name == name) return leaf[i];
        throw std::logic_error("block not found: " + name);
    };

    const int64_t tokens_n = batch.batch * batch.seq;
    std::vector<int32_t> inputs, targets;
    inputs.reserve(static_cast<size_t>(tokens_n));
    targets.reserve(static_cast<size_t>(tokens_n));
    for (int64_t b = 0; b < batch.batch; ++b)
        for (int64_t s = 0; s < batch.seq; ++s) {
            int32_t tin = batch.at(b, s), tout = batch.at(b, s + 1);
            if (tin < 0 || tin >= c.vocab || tout < 0 || tout >= c.vocab)
                throw std::out_of_range("batch: token id out of vocabulary");
            inputs.push_back(tin);
            targets.push_back(tout);
        }

    NodeId h = g.gather_rows(find_leaf("psi.emb"), inputs);

    NodeId moe_z_sum = g.leaf(TensorT<T>::zeros({1}), false);
    NodeId lb_sum = g.leaf(TensorT<T>::zeros({1}), false);

    for (int l = 0; l < c.layers; ++l) {
        NodeId normed = g.rmsnorm(h, find_leaf("psi.norm." + std::to_string(l)),
                                  static_cast<T>(c.rms_eps));
        NodeId logits = g.matmul(normed, find_leaf("psi.router." + std::to_string(l)));
        NodeId probs = g.softmax_rows(logits);

        RoutingDecision rd = route_from_logits(g.value(logits), c.experts_active,
                                               c.renormalize_after_topk);
        lg.routing.push_back(rd);

        // Renormalization denominator per token (sum of selected probs).
        NodeId denom = 0;
        if (c.renormalize_after_topk) {
            for (int s = 0; s < c.experts_active; ++s) {
                std::vector<int32_t> slot_col(static_cast<size_t>(tokens_n));
                for (int64_t t = 0; t < tokens_n; ++t)
                    slot_col[static_cast<size_t>(t)] =
                        rd.selected[static_cast<size_t>(t)][static_cast<size_t>(s)];
                NodeId colv = g.gather_cols(probs, slot_col);
                denom = (s == 0) ? colv : g.add(denom, colv);
            }
        }

        // Token groups per expert (dropless: every token reaches all selected experts).
        std::vector<std::vector<int32_t>> group(static_cast<size_t>(c.experts_total));
        for (int64_t t = 0; t < tokens_n; ++t)
            for (int32_t j : rd.selected[static_cast<size_t>(t)])
                group[static_cast<size_t>(j)].push_back(static_cast<int32_t>(t));

        NodeId moe_out = 0;
        bool have_out = false;
        for (int j = 0; j < c.experts_total; ++j) {
            const auto& idx = group[static_cast<size_t>(j)];
            if (idx.empty()) continue;
            lg.expert_evaluations += static_cast<int64_t>(idx.size());
            std::string base = "e." + std::to_string(l) + "." + std::to_string(j) + ".";
            NodeId xj = g.select_rows(normed, idx);
            NodeId yj = swiglu_expert(g, xj, find_leaf(base + "wg"), find_leaf(base + "wu"),
                                      find_leaf(base + "wd"));
            std::vector<int32_t> jcol(static_cast<size_t>(tokens_n), static_cast<int32_t>(j));
            NodeId wfull = g.gather_cols(probs, jcol);  // T x 1 gate prob of expert j
            if (c.renormalize_after_topk) wfull = g.div(wfull, denom);
            NodeId wj = g.select_rows(wfull, idx);
            NodeId contrib = g.scatter_rows(g.rowwise_mul(yj, wj), idx, tokens_n);
            moe_out = have_out ? g.add(moe_out, contrib) : contrib;
            have_out = true;
        }
        h = have_out ? g.add(h, moe_out) : h;

        // Router z-loss: mean over tokens of lse(router logits)^2.
        moe_z_sum = g.add(moe_z_sum, g.mean(g.square(g.logsumexp_rows(logits))));

        // GShard-style load balance: M * sum_j f_j * P_j, f_j from top-k dispatch.
        std::vector<T> coeff(static_cast<size_t>(c.experts_total));
        int64_t assignments = tokens_n * c.experts_active;
        for (int j = 0; j < c.experts_total; ++j) {
            double f_j = static_cast<double>(group[static_cast<size_t>(j)].size()) /
                         static_cast<double>(assignments);
            // lb contribution = M * f_j * mean_t probs[t][j]
            coeff[static_cast<size_t>(j)] =
                static_cast<T>(static_cast<double>(c.experts_total) * f_j /
                               static_cast<double>(tokens_n));
        }
        TensorT<T> cmat = TensorT<T>::zeros({tokens_n, c.experts_total});
        for (int64_t t = 0; t < tokens_n; ++t)
            for (int j = 0; j < c.experts_total; ++j)
                cmat.at(t, j) = coeff[static_cast<size_t>(j)];
        lb_sum = g.add(lb_sum, g.sum(g.mul(probs, g.leaf(std::move(cmat), false))));
    }

    if (c.tied_head) throw std::logic_error("tied head not implemented");
    NodeId out_logits = g.matmul(h, find_leaf("psi.head"));
    auto xent = softmax_cross_entropy(g, out_logits, targets);

    lg.ce = xent.loss;
    lg.z = g.mean(g.square(xent.lse));
    lg.moe_z = g.scale(moe_z_sum, T(1) / static_cast<T>(c.layers));
    lg.lb = g.scale(lb_sum, T(1) / static_cast<T>(c.layers));
    lg.total = g.add(
        g.add(g.scale(lg.ce, static_cast<T>(c.loss.ce)), g.scale(lg.lb, static_cast<T>(c.loss.lb))),
        g.add(g.scale(lg.moe_z, static_cast<T>(c.loss.moe_z)),
              g.scale(lg.z, static_cast<T>(c.loss.z))));
    return lg;
}

struct LossBundle {
    double total, ce, lb, moe_z, z;
};

template <typename T>
LossBundle model_loss(const ModelParamsT<T>& p, const Batch& batch) {
    auto lg = build_loss(p, batch, [](const BlockDesc&) { return false; });
    return {static_cast<double>(lg.g.value(lg.total).data[0]),
            static_cast<double>(lg.g.value(lg.ce).data[0]),
            static_cast<double>(lg.g.value(lg.lb).data[0]),
            static_cast<double>(lg.g.value(lg.moe_z).data[0]),
            static_cast<double>(lg.g.value(lg.z).data[0])};
}

// Forward through one MoE layer (norm excluded): weighted sum of selected experts.
template <typename T>
TensorT<T> moe_forward(const ModelParamsT<T>& p, const TensorT<T>& h, int layer) {
    RoutingDecision rd = route(p, h, layer);
    int64_t tokens = h.rows(), d = h.cols();
    TensorT<T> out = TensorT<T>::zeros({tokens, d});
    GraphT<T> g;
    for (int64_t t = 0; t < tokens; ++t) {
        TensorT<T> x({1, d}, std::vector<T>(h.data.begin() + t * d, h.data.begin() + (t + 1) * d));
        for (size_t s = 0; s < rd.selected[static_cast<size_t>(t)].size(); ++s) {
            int32_t j = rd.selected[static_cast<size_t>(t)][s];
            const auto& e = p.experts[static_cast<size_t>(layer)][static_cast<size_t>(j)];
            auto xid = g.leaf(x, false);
            auto y = swiglu_expert(g, xid, g.leaf(e.wg, false), g.leaf(e.wu, false),
                                   g.leaf(e.wd, false));
            T w = static_cast<T>(rd.weights[static_cast<size_t>(t)][s]);
            const auto& yv = g.value(y);
            for (int64_t col = 0; col < d; ++col) out.at(t, col) += w * yv.data[static_cast<size_t>(col)];
        }
    }
    return out;
}

// ---- upcycling ----

template <typename T>
ModelParamsT<T> upcycle_from_dense(const ModelParamsT<T>& dense, int m, double noise_frac,
                                   double noise_std, uint64_t seed) {
    if (dense.config.experts_total != 1)
        throw std::invalid_argument("upcycle: source must have a single expert");
    if (m < 2) throw std::invalid_argument("upcycle: need M >= 2");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_std);

    ModelParamsT<T> out;
    out.config = dense.config;
    out.config.experts_total = m;
    out.config.renormalize_after_topk = true;
    out.shared.embedding = dense.shared.embedding;
    out.shared.norm_gain = dense.shared.norm_gain;
    if (!dense.config.tied_head) out.shared.head = dense.shared.head;
    // Router widens from d x 1 to d x M; replicate the single column.
    for (const auto& r : dense.shared.router) {
        TensorT<T> wide = TensorT<T>::zeros({r.rows(), static_cast<int64_t>(m)});
        for (int64_t row = 0; row < r.rows(); ++row)
            for (int j = 0; j < m; ++j) wide.at(row, j) = r.at(row, 0);
        out.shared.router.push_back(std::move(wide));
    }

    auto perturb = [&](TensorT<T> t) {
        size_t n = t.data.size();
        size_t subset = static_cast<size_t>(std::llround(noise_frac * static_cast<double>(n)));
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        for (size_t i = 0; i < subset; ++i) {
            std::uniform_int_distribution<size_t> pick(i, n - 1);
            std::swap(order[i], order[pick(rng)]);
            double nz = noise(rng);
            if (noise_std > 0.0) t.data[order[i]] += static_cast<T>(nz);
        }
        return t;
    };

    out.experts.resize(dense.experts.size());
    for (size_t l = 0; l < dense.experts.size(); ++l) {
        const auto& src = dense.experts[l][0];
        for (int j = 0; j < m; ++j)
            out.experts[l].push_back({perturb(src.wg), perturb(src.wu), perturb(src.wd)});
    }
    return out;
}

// ---- expert partition ----

// Balanced contiguous split; identical index set across layers. Every node
// gets at least one expert, hence N <= M.
inline std::vector<std::vector<int>> param_partition(const ModelConfig& c, int n) {
    if (n < 1 || n > c.experts_total)
        throw std::invalid_argument("partition: need 1 <= N <= M (no empty nodes)");
    std::vector<std::vector<int>> out(static_cast<size_t>(n));
    int m = c.experts_total;
    int base = m / n, extra = m % n, next = 0;
    for (int i = 0; i < n; ++i) {
        int take = base + (i < extra ? 1 : 0);
        for (int j = 0; j < take; ++j) out[static_cast<size_t>(i)].push_back(next++);
    }
    return out;
}

}  // namespace spes
