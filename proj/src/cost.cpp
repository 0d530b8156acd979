#include "spes/cost.hpp"

#include <cmath>
#include <sstream>

namespace spes {

// ---- shape accounting ----

int64_t ShapeSpec::shared_params() const {
    int64_t n = 0;
    for (const auto& b : enumerate_blocks(model))
        if (!b.is_expert()) n += Tensor::numel_of(b.shape);
    if (attn_heads > 0) {
        int64_t d = model.hidden;
        int64_t q = d * static_cast<int64_t>(attn_heads) * attn_head_dim;
        int64_t kv_heads = attn_kv_heads > 0 ? attn_kv_heads : attn_heads;
        int64_t kv = d * kv_heads * static_cast<int64_t>(attn_head_dim);
        // q, o, k, v projections per layer
        n += model.layers * (2 * q + 2 * kv);
    }
    return n;
}

int64_t ShapeSpec::expert_params() const {
    int64_t n = 0;
    for (const auto& b : enumerate_blocks(model))
        if (b.is_expert()) n += Tensor::numel_of(b.shape);
    return n;
}

int64_t ShapeSpec::owned_expert_params() const {
    auto part = param_partition(model, nodes);
    int64_t per_expert = 3 * model.hidden * model.intermediate * model.layers;
    return static_cast<int64_t>(part[0].size()) * per_expert;
}

CostReport cost_report(const ShapeSpec& spec) {
    spec.model.validate();
    CostReport r;
    r.psi = spec.shared_params();
    r.phi = spec.expert_params();
    r.phi_i = spec.owned_expert_params();
    r.nodes = spec.nodes;
    r.mem_centralized = 4 * (r.psi + r.phi);
    r.mem_diloco = 4 * (r.psi + r.phi);
    r.mem_spes = 4 * r.psi + r.phi + 3 * r.phi_i;
    int64_t n = spec.nodes;
    r.comm_spes = n * (2 * r.psi + r.phi + r.phi_i);
    r.comm_diloco = 2 * n * (r.psi + r.phi);
    r.upload_per_node = r.psi + r.phi_i;
    r.download_per_node = r.psi + r.phi;
    r.comm_ratio = static_cast<double>(r.comm_spes) / static_cast<double>(r.comm_diloco);
    return r;
}

std::string CostReport::to_json() const {
    std::ostringstream os;
    os << "{\"psi\":" << psi << ",\"phi\":" << phi << ",\"phi_i\":" << phi_i
       << ",\"nodes\":" << nodes << ",\"mem_centralized\":" << mem_centralized
       << ",\"mem_diloco\":" << mem_diloco << ",\"mem_spes\":" << mem_spes
       << ",\"comm_spes\":" << comm_spes << ",\"comm_diloco\":" << comm_diloco
       << ",\"upload_per_node\":" << upload_per_node
       << ",\"download_per_node\":" << download_per_node << ",\"comm_ratio\":" << comm_ratio
       << ",\"bytes_per_param\":" << bytes_per_param << "}";
    return os.str();
}

ShapeSpec paper_2b_spec(int nodes) {
    ShapeSpec s;
    s.model.vocab = 151936;
    s.model.hidden = 1536;
    s.model.intermediate = 1280;
    s.model.layers = 16;
    s.model.experts_total = 16;
    s.model.experts_active = 4;
    s.nodes = nodes;
    s.attn_heads = 24;
    s.attn_head_dim = 64;
    s.attn_kv_heads = 24;
    return s;
}

ShapeSpec paper_7b_spec(int nodes) {
    ShapeSpec s;
    s.model.vocab = 151936;
    s.model.hidden = 2048;
    s.model.intermediate = 2048;
    s.model.layers = 16;
    s.model.experts_total = 32;
    s.model.experts_active = 4;
    s.nodes = nodes;
    s.attn_heads = 16;
    s.attn_head_dim = 128;
    s.attn_kv_heads = 8;
    return s;
}

// ---- block vector ----

BlockVec BlockVec::zeros_like(const BlockVec& v) {
    BlockVec z;
    z.shared.assign(v.shared.size(), 0.0);
    for (const auto& e : v.expert) z.expert.emplace_back(e.size(), 0.0);
    return z;
}

double BlockVec::shared_norm_sq() const {
    double n = 0;
    for (double v : shared) n += v * v;
    return n;
}

double BlockVec::expert_norm_sq() const {
    double n = 0;
    for (const auto& e : expert)
        for (double v : e) n += v * v;
    return n;
}

double BlockVec::norm_sq() const { return shared_norm_sq() + expert_norm_sq(); }

void BlockVec::axpy(double a, const BlockVec& x) {
    for (size_t i = 0; i < shared.size(); ++i) shared[i] += a * x.shared[i];
    for (size_t j = 0; j < expert.size(); ++j)
        for (size_t i = 0; i < expert[j].size(); ++i) expert[j][i] += a * x.expert[j][i];
}

BlockVec BlockVec::minus(const BlockVec& o) const {
    BlockVec d = *this;
    d.axpy(-1.0, o);
    return d;
}

// ---- toy problems ----

BlockVec ToyProblem::zero_point() const {
    BlockVec w;
    w.shared.assign(static_cast<size_t>(dim), 0.0);
    for (int j = 0; j < experts; ++j) w.expert.emplace_back(static_cast<size_t>(dim), 0.0);
    return w;
}

double ToyProblem::sample_loss(const BlockVec& w, int idx) const {
    if (kind == Kind::Quadratic) return 0.5 * w.norm_sq();
    const ToySample& s = samples[static_cast<size_t>(idx)];
    double z = 0;
    for (int i = 0; i < dim; ++i)
        z += s.x[static_cast<size_t>(i)] *
             (w.shared[static_cast<size_t>(i)] +
              w.expert[static_cast<size_t>(s.expert)][static_cast<size_t>(i)]);
    double m = -s.label * z;
    // log(1 + exp(m)), stable
    return m > 0 ? m + std::log1p(std::exp(-m)) : std::log1p(std::exp(m));
}

void ToyProblem::sample_grad_acc(const BlockVec& w, int idx, double scale, BlockVec& out) const {
    if (kind == Kind::Quadratic) {
        out.axpy(scale, w);
        return;
    }
    const ToySample& s = samples[static_cast<size_t>(idx)];
    double z = 0;
    for (int i = 0; i < dim; ++i)
        z += s.x[static_cast<size_t>(i)] *
             (w.shared[static_cast<size_t>(i)] +
              w.expert[static_cast<size_t>(s.expert)][static_cast<size_t>(i)]);
    double sig = 1.0 / (1.0 + std::exp(s.label * z));
    double c = scale * (-s.label * sig);
    for (int i = 0; i < dim; ++i) {
        double g = c * s.x[static_cast<size_t>(i)];
        out.shared[static_cast<size_t>(i)] += g;
        out.expert[static_cast<size_t>(s.expert)][static_cast<size_t>(i)] += g;
    }
}

BlockVec ToyProblem::grad(const BlockVec& w, std::span<const int> idx) const {
    BlockVec g = BlockVec::zeros_like(w);
    if (idx.empty()) throw std::invalid_argument("toy grad: empty index set");
    double scale = 1.0 / static_cast<double>(idx.size());
    for (int i : idx) sample_grad_acc(w, i, scale, g);
    return g;
}

double ToyProblem::loss(const BlockVec& w, std::span<const int> idx) const {
    if (idx.empty()) throw std::invalid_argument("toy loss: empty index set");
    double acc = 0;
    for (int i : idx) acc += sample_loss(w, i);
    return acc / static_cast<double>(idx.size());
}

std::vector<int> ToyProblem::all_indices() const {
    std::vector<int> idx(samples.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    return idx;
}

BlockVec ToyProblem::full_grad(const BlockVec& w) const {
    auto idx = all_indices();
    return grad(w, idx);
}

double ToyProblem::full_loss(const BlockVec& w) const {
    auto idx = all_indices();
    return loss(w, idx);
}

namespace {
std::vector<std::vector<int>> contiguous_split(int total, int parts) {
    std::vector<std::vector<int>> out(static_cast<size_t>(parts));
    int base = total / parts, extra = total % parts, next = 0;
    for (int i = 0; i < parts; ++i) {
        int take = base + (i < extra ? 1 : 0);
        for (int j = 0; j < take; ++j) out[static_cast<size_t>(i)].push_back(next++);
    }
    return out;
}
}  // namespace

ToyProblem make_quadratic(int dim, int experts, int nodes) {
    ToyProblem p;
    p.kind = ToyProblem::Kind::Quadratic;
    p.dim = dim;
    p.experts = experts;
    // One dummy sample per node; the quadratic objective is data-free.
    for (int i = 0; i < nodes; ++i) {
        p.samples.push_back({std::vector<double>(static_cast<size_t>(dim), 0.0), 1.0, 0});
        p.shards.push_back({i});
    }
    p.owners = contiguous_split(experts, nodes);
    return p;
}

ToyProblem make_logistic(int dim, int experts, int nodes, int per_node, uint64_t seed,
                         bool heterogeneous) {
    ToyProblem p;
    p.kind = ToyProblem::Kind::Logistic;
    p.dim = dim;
    p.experts = experts;
    p.owners = contiguous_split(experts, nodes);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> feat(0.0, 1.0);
    std::uniform_int_distribution<int> any_expert(0, experts - 1);
    std::bernoulli_distribution coin(0.5);
    // A fixed ground-truth direction makes the problem learnable.
    std::vector<double> truth(static_cast<size_t>(dim));
    for (auto& v : truth) v = feat(rng);
    for (int n = 0; n < nodes; ++n) {
        std::vector<int> shard;
        for (int s = 0; s < per_node; ++s) {
            ToySample smp;
            smp.x.resize(static_cast<size_t>(dim));
            for (auto& v : smp.x) v = feat(rng);
            double z = 0;
            for (int i = 0; i < dim; ++i) z += truth[static_cast<size_t>(i)] * smp.x[static_cast<size_t>(i)];
            if (heterogeneous) {
                // Disjoint expert usage and label skew per node.
                const auto& own = p.owners[static_cast<size_t>(n)];
                smp.expert = own[static_cast<size_t>(s) % own.size()];
                smp.label = (n % 2 == 0) ? 1.0 : -1.0;
            } else {
                smp.expert = any_expert(rng);
                smp.label = (z + (coin(rng) ? 0.3 : -0.3)) > 0 ? 1.0 : -1.0;
            }
            shard.push_back(static_cast<int>(p.samples.size()));
            p.samples.push_back(std::move(smp));
        }
        p.shards.push_back(std::move(shard));
    }
    return p;
}

// ---- constant estimation ----

namespace {
BlockVec perturbed(const BlockVec& at, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, std);
    BlockVec w = at;
    for (auto& v : w.shared) v += n(rng);
    for (auto& e : w.expert)
        for (auto& v : e) v += n(rng);
    return w;
}
}  // namespace

TheoryProbe estimate_constants(const ToyProblem& p, const BlockVec& at, int samples,
                               uint64_t seed) {
    if (samples < 30) throw std::invalid_argument("estimate_constants: need samples >= 30");
    std::mt19937_64 rng(seed);
    TheoryProbe probe;
    BlockVec gf = p.full_grad(at);
    probe.measured_avg_grad_sq = gf.norm_sq();
    if (!std::isfinite(probe.measured_avg_grad_sq))
        throw std::runtime_error("estimate_constants: non-finite gradient");

    // L: max sampled gradient-difference quotient (a lower bound on the truth).
    for (int s = 0; s < samples; ++s) {
        BlockVec a = perturbed(at, 0.1, rng);
        BlockVec b = perturbed(at, 0.1, rng);
        double dw = a.minus(b).norm_sq();
        if (dw <= 0) continue;
        double dg = p.full_grad(a).minus(p.full_grad(b)).norm_sq();
        probe.L = std::max(probe.L, std::sqrt(dg / dw));
    }

    // G and the per-sample variances around the full-shard gradient.
    std::uniform_int_distribution<int> pick(0, static_cast<int>(p.samples.size()) - 1);
    double var_psi = 0, var_phi = 0;
    for (int s = 0; s < samples; ++s) {
        int idx = pick(rng);
        BlockVec g = BlockVec::zeros_like(at);
        p.sample_grad_acc(at, idx, 1.0, g);
        if (!std::isfinite(g.norm_sq()))
            throw std::runtime_error("estimate_constants: non-finite stochastic gradient");
        probe.G = std::max(probe.G, std::sqrt(g.norm_sq()));
        BlockVec d = g.minus(gf);
        var_psi += d.shared_norm_sq();
        var_phi += d.expert_norm_sq();
    }
    probe.sigma_psi_sq = var_psi / samples;
    probe.sigma_phi_sq = var_phi / samples;

    // zeta_phi: owner-shard expert gradient vs the global expert gradient.
    for (int n = 0; n < p.nodes(); ++n) {
        BlockVec gn = p.grad(at, p.shards[static_cast<size_t>(n)]);
        for (int j : p.owners[static_cast<size_t>(n)]) {
            double d2 = 0;
            const auto& a = gn.expert[static_cast<size_t>(j)];
            const auto& b = gf.expert[static_cast<size_t>(j)];
            for (size_t i = 0; i < a.size(); ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
            probe.zeta_phi = std::max(probe.zeta_phi, std::sqrt(d2));
        }
    }
    return probe;
}

std::string TheoryProbe::to_json() const {
    std::ostringstream os;
    os << "{\"L\":" << L << ",\"G\":" << G << ",\"sigma_psi_sq\":" << sigma_psi_sq
       << ",\"sigma_phi_sq\":" << sigma_phi_sq << ",\"zeta_phi\":" << zeta_phi
       << ",\"measured_avg_grad_sq\":" << measured_avg_grad_sq << "}";
    return os.str();
}

Theorem1Bound theorem1_rhs(const TheoryProbe& probe, const Theorem1Inputs& in) {
    Theorem1Bound b;
    double ehT = in.eta * in.H * in.T;
    b.term_opt = 4.0 * in.F0_minus_Finf / ehT;
    b.term_var = 6.0 * in.eta * probe.L * (probe.sigma_psi_sq / in.N + probe.sigma_phi_sq);
    b.term_drift = 12.0 * probe.L * probe.L * in.eta * in.eta * in.H * in.H * probe.G * probe.G;
    b.term_hetero = 12.0 * probe.zeta_phi * probe.zeta_phi;
    double alpha_sq_sum = 0;
    for (int t = 0; t < in.merge.warmup_rounds; ++t) {
        double a = alpha_at(in.merge, t);
        alpha_sq_sum += a * a;
    }
    b.term_merge = probe.L * in.B_merge * in.B_merge / ehT * alpha_sq_sum;
    b.total = b.term_opt + b.term_var + b.term_drift + b.term_hetero + b.term_merge;
    b.step_condition_ok = in.eta * probe.L <= 0.25;
    return b;
}

std::vector<VarianceRow> variance_reduction_check(const ToyProblem& p, const BlockVec& at,
                                                  const std::vector<int>& n_values, int reps,
                                                  int batch, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(p.samples.size()) - 1);
    BlockVec gf = p.full_grad(at);
    std::vector<VarianceRow> out;
    for (int n : n_values) {
        VarianceRow row;
        row.n = n;
        double var_s = 0, var_e = 0;
        for (int r = 0; r < reps; ++r) {
            // Shared estimator: mean over n nodes of a batch gradient; every
            // node samples the identical distribution (whole corpus).
            std::vector<double> mean_shared(at.shared.size(), 0.0);
            for (int node = 0; node < n; ++node) {
                BlockVec g = BlockVec::zeros_like(at);
                for (int s = 0; s < batch; ++s)
                    p.sample_grad_acc(at, pick(rng), 1.0 / batch, g);
                for (size_t i = 0; i < mean_shared.size(); ++i)
                    mean_shared[i] += g.shared[i] / n;
            }
            for (size_t i = 0; i < mean_shared.size(); ++i) {
                double d = mean_shared[i] - gf.shared[i];
                var_s += d * d;
            }
            // Expert estimator: single-owner batch gradient, no averaging.
            BlockVec g = BlockVec::zeros_like(at);
            for (int s = 0; s < batch; ++s) p.sample_grad_acc(at, pick(rng), 1.0 / batch, g);
            var_e += g.minus(gf).expert_norm_sq();
        }
        row.shared_var = var_s / reps;
        row.expert_var = var_e / reps;
        out.push_back(row);
    }
    return out;
}

ToyRunResult run_toy_spes(const ToyProblem& p, double eta, int H, int N, int T, int batch,
                          uint64_t seed) {
    if (N != p.nodes()) throw std::invalid_argument("run_toy_spes: N must match problem shards");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> init(0.0, 0.5);
    BlockVec theta = p.zero_point();
    for (auto& v : theta.shared) v = init(rng);
    for (auto& e : theta.expert)
        for (auto& v : e) v = init(rng);

    ToyRunResult res;
    for (int t = 0; t < T; ++t) {
        res.grad_sq_per_round.push_back(p.full_grad(theta).norm_sq());
        std::vector<BlockVec> locals(static_cast<size_t>(N), theta);
        for (int n = 0; n < N; ++n) {
            const auto& shard = p.shards[static_cast<size_t>(n)];
            std::uniform_int_distribution<int> pick(0, static_cast<int>(shard.size()) - 1);
            const auto& own = p.owners[static_cast<size_t>(n)];
            for (int h = 1; h <= H; ++h) {
                BlockVec g = BlockVec::zeros_like(theta);
                for (int s = 0; s < batch; ++s)
                    p.sample_grad_acc(locals[static_cast<size_t>(n)],
                                      shard[static_cast<size_t>(pick(rng))], 1.0 / batch, g);
                // Block mask: zero non-owned expert components.
                for (int j = 0; j < p.experts; ++j)
                    if (std::find(own.begin(), own.end(), j) == own.end())
                        std::fill(g.expert[static_cast<size_t>(j)].begin(),
                                  g.expert[static_cast<size_t>(j)].end(), 0.0);
                res.G_meas = std::max(res.G_meas, std::sqrt(g.norm_sq()));
                locals[static_cast<size_t>(n)].axpy(-eta, g);
                double drift = locals[static_cast<size_t>(n)].minus(theta).norm_sq();
                double bound = eta * eta * static_cast<double>(h) * h * res.G_meas * res.G_meas;
                double ratio = bound > 0 ? drift / bound : (drift > 0 ? 1e30 : 0.0);
                res.max_drift_ratio = std::max(res.max_drift_ratio, ratio);
                if (drift > bound * (1.0 + 1e-9)) res.drift_ok = false;
            }
        }
        // Sparse aggregation: shared mean, experts verbatim from owners.
        for (size_t i = 0; i < theta.shared.size(); ++i) {
            double acc = 0;
            for (int n = 0; n < N; ++n) acc += locals[static_cast<size_t>(n)].shared[i];
            theta.shared[i] = acc / N;
        }
        for (int n = 0; n < N; ++n)
            for (int j : p.owners[static_cast<size_t>(n)])
                theta.expert[static_cast<size_t>(j)] =
                    locals[static_cast<size_t>(n)].expert[static_cast<size_t>(j)];
    }
    double s = 0;
    for (double v : res.grad_sq_per_round) s += v;
    res.avg_grad_sq = s / static_cast<double>(res.grad_sq_per_round.size());
    res.final_loss = p.full_loss(theta);
    return res;
}

}  // namespace spes
