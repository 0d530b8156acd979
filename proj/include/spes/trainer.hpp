#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spes/model.hpp"

namespace spes {

// Block mask U_i: shared blocks plus the node's owned experts are trainable,
// everything else is frozen. Masking is idempotent and norm-contractive.
struct TrainMask {
    int node_id = 0;
    std::vector<int> owned_experts;  // sorted, distinct

    bool owns(int expert) const {
        return std::binary_search(owned_experts.begin(), owned_experts.end(), expert);
    }
    bool trainable(const BlockDesc& b) const { return !b.is_expert() || owns(b.expert); }

    static TrainMask all(const ModelConfig& c, int node_id = 0) {
        TrainMask m;
        m.node_id = node_id;
        for (int j = 0; j < c.experts_total; ++j) m.owned_experts.push_back(j);
        return m;
    }
};

// Zero non-trainable blocks of a block-structured vector in place.
inline void apply_mask(std::vector<Tensor>& blocks, const std::vector<BlockDesc>& descs,
                       const TrainMask& mask) {
    for (size_t i = 0; i < blocks.size(); ++i)
        if (!mask.trainable(descs[i]))
            std::fill(blocks[i].data.begin(), blocks[i].data.end(), 0.f);
}

struct GradBlock {
    size_t block_index;  // into enumerate_blocks(config)
    Tensor grad;
};

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

// AdamW with bias correction and decoupled weight decay, holding first/second
// moments only for the blocks trainable under the mask. Requesting a step on a
// block without state is an invariant breach, not a silent allocation.
class MaskedAdamW {
public:
    MaskedAdamW(const ModelConfig& config, const TrainMask& mask) : mask_(mask) {
        auto blocks = enumerate_blocks(config);
        for (size_t i = 0; i < blocks.size(); ++i)
            if (mask.trainable(blocks[i])) {
                int64_t n = Tensor::numel_of(blocks[i].shape);
                state_.emplace(i, Moments{std::vector<float>(static_cast<size_t>(n), 0.f),
                                          std::vector<float>(static_cast<size_t>(n), 0.f)});
            }
    }

    void step(ModelParams& params, const std::vector<GradBlock>& grads, const AdamWConfig& cfg) {
        ++step_count_;
        auto blocks = enumerate_blocks(params.config);
        float bc1 = 1.f - static_cast<float>(std::pow(cfg.beta1, step_count_));
        float bc2 = 1.f - static_cast<float>(std::pow(cfg.beta2, step_count_));
        for (const auto& gb : grads) {
            auto it = state_.find(gb.block_index);
            if (it == state_.end())
                throw std::logic_error("masked adamw: no optimizer state for block " +
                                       blocks.at(gb.block_index).name);
            Tensor& theta = block_tensor(params, blocks[gb.block_index]);
            Moments& mo = it->second;
            const float lr = static_cast<float>(cfg.lr);
            const float b1 = static_cast<float>(cfg.beta1);
            const float b2 = static_cast<float>(cfg.beta2);
            const float eps = static_cast<float>(cfg.eps);
            const float wd = static_cast<float>(cfg.weight_decay);
            for (size_t i = 0; i < theta.data.size(); ++i) {
                float g = gb.grad.data[i];
                mo.m[i] = b1 * mo.m[i] + (1.f - b1) * g;
                mo.v[i] = b2 * mo.v[i] + (1.f - b2) * g * g;
                float mhat = mo.m[i] / bc1;
                float vhat = mo.v[i] / bc2;
                theta.data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * theta.data[i]);
            }
        }
    }

    int64_t state_scalar_count() const {
        int64_t n = 0;
        for (const auto& [idx, mo] : state_) n += static_cast<int64_t>(mo.m.size() + mo.v.size());
        return n;
    }

    int64_t step_count() const { return step_count_; }
    const TrainMask& mask() const { return mask_; }

private:
    struct Moments {
        std::vector<float> m, v;
    };
    TrainMask mask_;
    std::map<size_t, Moments> state_;
    int64_t step_count_ = 0;
};

using BatchProvider = std::function<Batch()>;

enum class InnerOpt { AdamW, SGD };

struct LocalRoundConfig {
    int steps = 1;  // H
    AdamWConfig opt;
    InnerOpt inner = InnerOpt::AdamW;
    bool record_trace = false;  // keep per-step drift / update norms / grad sums
    // Optional schedule: effective lr at global step first_step + h overrides opt.lr.
    std::function<double(int64_t)> lr_at;
    int64_t first_step = 0;
};

struct LocalRoundResult {
    ModelParams params;
    std::vector<LossBundle> step_losses;
    int64_t grad_scalar_count = 0;  // gradient-buffer scalars (= |psi| + |Phi_i|)
    // Present when record_trace: per-step masked update norm ||U g|| (SGD) or
    // update-direction norm (AdamW), and squared drift from the round entry.
    std::vector<double> update_norms;
    std::vector<double> drift_sq;
    // Sum over steps of masked gradients, per trainable block (SGD theory hook).
    std::vector<GradBlock> grad_sum;
};

// One H-step local round. Frozen blocks are never touched; with AdamW the
// caller may pass persistent optimizer state (carry_state), otherwise a fresh
// state is used for the round.
inline LocalRoundResult local_round(const ModelParams& global, const BatchProvider& next_batch,
                                    const LocalRoundConfig& cfg, const TrainMask& mask,
                                    MaskedAdamW* carried = nullptr) {
    if (cfg.steps < 1) throw std::invalid_argument("local_round: need H >= 1");
    LocalRoundResult res;
    res.params = global;
    auto blocks = enumerate_blocks(global.config);

    std::optional<MaskedAdamW> own_state;
    MaskedAdamW* opt = carried;
    if (!opt && cfg.inner == InnerOpt::AdamW) {
        own_state.emplace(global.config, mask);
        opt = &*own_state;
    }

    TrainablePredicate pred = [&mask](const BlockDesc& b) { return mask.trainable(b); };

    AdamWConfig opt_cfg = cfg.opt;
    for (int h = 0; h < cfg.steps; ++h) {
        if (cfg.lr_at) opt_cfg.lr = cfg.lr_at(cfg.first_step + h);
        Batch batch = next_batch();
        auto lg = build_loss(res.params, batch, pred);
        double total = static_cast<double>(lg.g.value(lg.total).data[0]);
        if (!std::isfinite(total))
            throw std::runtime_error("local_round: non-finite loss at step " + std::to_string(h));
        res.step_losses.push_back({total, static_cast<double>(lg.g.value(lg.ce).data[0]),
                                   static_cast<double>(lg.g.value(lg.lb).data[0]),
                                   static_cast<double>(lg.g.value(lg.moe_z).data[0]),
                                   static_cast<double>(lg.g.value(lg.z).data[0])});
        lg.g.backward(lg.total);

        std::vector<GradBlock> grads;
        int64_t gcount = 0;
        for (size_t i = 0; i < blocks.size(); ++i) {
            if (!mask.trainable(blocks[i])) continue;
            grads.push_back({i, lg.g.grad(lg.block_leaves[i])});
            gcount += grads.back().grad.numel();
        }
        res.grad_scalar_count = gcount;

        if (cfg.record_trace) {
            double n2 = 0.0;
            for (const auto& gb : grads)
                for (float v : gb.grad.data) n2 += static_cast<double>(v) * v;
            res.update_norms.push_back(std::sqrt(n2));
            if (res.grad_sum.empty()) {
                for (const auto& gb : grads) res.grad_sum.push_back({gb.block_index, gb.grad});
            } else {
                for (size_t i = 0; i < grads.size(); ++i)
                    for (size_t j = 0; j < grads[i].grad.data.size(); ++j)
                        res.grad_sum[i].grad.data[j] += grads[i].grad.data[j];
            }
        }

        if (cfg.inner == InnerOpt::SGD) {
            float lr = static_cast<float>(opt_cfg.lr);
            for (const auto& gb : grads) {
                Tensor& theta = block_tensor(res.params, blocks[gb.block_index]);
                for (size_t i = 0; i < theta.data.size(); ++i)
                    theta.data[i] -= lr * gb.grad.data[i];
            }
        } else {
            opt->step(res.params, grads, opt_cfg);
        }

        if (cfg.record_trace) {
            double d2 = 0.0;
            for (size_t i = 0; i < blocks.size(); ++i) {
                const Tensor& a = block_tensor(res.params, blocks[i]);
                const Tensor& b = block_tensor(global, blocks[i]);
                for (size_t j = 0; j < a.data.size(); ++j) {
                    double d = static_cast<double>(a.data[j]) - static_cast<double>(b.data[j]);
                    d2 += d * d;
                }
            }
            res.drift_sq.push_back(d2);
        }
    }
    return res;
}

// ---- outer optimizer (DiLoCo-style full-model synchronization) ----

enum class OuterKind { SGD, Nesterov };

class OuterOptimizer {
public:
    OuterOptimizer(OuterKind kind, double lr, double momentum = 0.9)
        : kind_(kind), lr_(lr), momentum_(momentum) {}

    // theta <- OuterOpt(theta, mean_i(local_i - theta)). All arithmetic in
    // 64-bit so that SGD with lr=1 and N=1 reproduces local params bit-exactly
    // after the round trip through float.
    void step(ModelParams& theta, const std::vector<const ModelParams*>& locals) {
        if (locals.empty()) throw std::invalid_argument("outer_step: missing node deltas");
        auto blocks = enumerate_blocks(theta.config);
        if (buf_.empty() && kind_ == OuterKind::Nesterov) buf_.resize(blocks.size());
        double inv_n = 1.0 / static_cast<double>(locals.size());
        for (size_t i = 0; i < blocks.size(); ++i) {
            Tensor& t = block_tensor(theta, blocks[i]);
            std::vector<double> delta(t.data.size(), 0.0);
            for (const ModelParams* lp : locals) {
                const Tensor& lt = block_tensor(*lp, blocks[i]);
                for (size_t j = 0; j < delta.size(); ++j)
                    delta[j] += (static_cast<double>(lt.data[j]) -
                                 static_cast<double>(t.data[j])) * inv_n;
            }
            if (kind_ == OuterKind::SGD) {
                for (size_t j = 0; j < delta.size(); ++j)
                    t.data[j] = static_cast<float>(static_cast<double>(t.data[j]) +
                                                   lr_ * delta[j]);
            } else {
                auto& b = buf_[i];
                if (b.empty()) b.assign(t.data.size(), 0.0);
                for (size_t j = 0; j < delta.size(); ++j) {
                    double g = -delta[j];  // outer gradient
                    b[j] = momentum_ * b[j] + g;
                    t.data[j] = static_cast<float>(static_cast<double>(t.data[j]) -
                                                   lr_ * (g + momentum_ * b[j]));
                }
            }
        }
    }

private:
    OuterKind kind_;
    double lr_, momentum_;
    std::vector<std::vector<double>> buf_;
};

}  // namespace spes
