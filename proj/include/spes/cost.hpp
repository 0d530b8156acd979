#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "spes/merging.hpp"
#include "spes/model.hpp"

namespace spes {

// ---- analytic memory / communication model ----

// Shape source for cost accounting. Attention-shaped shared blocks (q/k/v/o
// projections) can be included in |psi| for paper-scale configs even though
// the desk-scale model never executes them; set heads to 0 to disable.
struct ShapeSpec {
    ModelConfig model;
    int nodes = 1;
    int attn_heads = 0;
    int attn_head_dim = 0;
    int attn_kv_heads = 0;

    int64_t shared_params() const;        // |psi|
    int64_t expert_params() const;        // |Phi|
    int64_t owned_expert_params() const;  // |Phi_i| for node 0 (largest share)
};

struct CostReport {
    int64_t psi = 0, phi = 0, phi_i = 0;
    int nodes = 1;
    // Static per-node memory in parameter units (params + grad + two moments).
    int64_t mem_centralized = 0;  // 4(|psi|+|Phi|)
    int64_t mem_diloco = 0;       // 4(|psi|+|Phi|)
    int64_t mem_spes = 0;         // 4|psi| + |Phi| + 3|Phi_i|
    // Per-round communication in parameter units, summed over nodes.
    int64_t comm_spes = 0;    // N(2|psi| + |Phi| + |Phi_i|)
    int64_t comm_diloco = 0;  // 2N(|psi| + |Phi|)
    int64_t upload_per_node = 0;    // |psi| + |Phi_i|
    int64_t download_per_node = 0;  // |psi| + |Phi|
    double comm_ratio = 0.0;        // spes / diloco
    int bytes_per_param = 4;

    std::string to_json() const;
};

CostReport cost_report(const ShapeSpec& spec);

// Paper-scale presets (counts only; never instantiated as live models).
ShapeSpec paper_2b_spec(int nodes = 16);
ShapeSpec paper_7b_spec(int nodes = 4);

// ---- convex toy suite for the convergence-theory checks ----

// Block-structured parameter vector: one shared block + M expert blocks.
struct BlockVec {
    std::vector<double> shared;
    std::vector<std::vector<double>> expert;

    static BlockVec zeros_like(const BlockVec& v);
    double norm_sq() const;
    double shared_norm_sq() const;
    double expert_norm_sq() const;
    void axpy(double a, const BlockVec& x);  // this += a*x
    BlockVec minus(const BlockVec& o) const;
};

struct ToySample {
    std::vector<double> x;
    double label = 0;  // +-1 for logistic
    int expert = 0;    // which expert block the sample activates
};

// Convex problems with the shared/expert structure of the training objective:
// a quadratic and a mixture logistic regression where each sample's logit is
// x.(shared + expert_j). Shards give per-node sample index sets.
struct ToyProblem {
    enum class Kind { Quadratic, Logistic };
    Kind kind = Kind::Quadratic;
    int dim = 4;
    int experts = 2;
    std::vector<ToySample> samples;
    std::vector<std::vector<int>> shards;  // per node
    std::vector<std::vector<int>> owners;  // per node: owned expert indices

    int nodes() const { return static_cast<int>(shards.size()); }
    BlockVec zero_point() const;
    double sample_loss(const BlockVec& w, int idx) const;
    void sample_grad_acc(const BlockVec& w, int idx, double scale, BlockVec& out) const;
    BlockVec grad(const BlockVec& w, std::span<const int> idx) const;
    double loss(const BlockVec& w, std::span<const int> idx) const;
    BlockVec full_grad(const BlockVec& w) const;
    double full_loss(const BlockVec& w) const;
    std::vector<int> all_indices() const;
};

ToyProblem make_quadratic(int dim, int experts, int nodes);
// heterogeneous=true gives each node a disjoint label/expert distribution.
ToyProblem make_logistic(int dim, int experts, int nodes, int per_node, uint64_t seed,
                         bool heterogeneous);

struct TheoryProbe {
    double L = 0;             // smoothness (sampled quotient, lower bound)
    double G = 0;             // max stochastic update-direction norm
    double sigma_psi_sq = 0;  // shared-gradient variance
    double sigma_phi_sq = 0;  // expert-gradient variance
    double zeta_phi = 0;      // expert heterogeneity
    double measured_avg_grad_sq = 0;

    std::string to_json() const;
};

TheoryProbe estimate_constants(const ToyProblem& p, const BlockVec& at, int samples,
                               uint64_t seed);

struct Theorem1Inputs {
    double eta = 0.1;
    int H = 1, N = 1, T = 1;
    double F0_minus_Finf = 0;
    MergeSchedule merge;   // alpha0 / warmup_rounds drive the merge term
    double B_merge = 0;    // Assumption-4 constant
};

struct Theorem1Bound {
    double term_opt = 0;     // 4(F0 - Finf) / (eta H T)
    double term_var = 0;     // 6 eta L (sigma_psi^2 / N + sigma_phi^2)
    double term_drift = 0;   // 12 L^2 eta^2 H^2 G^2
    double term_hetero = 0;  // 12 zeta_phi^2
    double term_merge = 0;   // (L B^2 / (eta H T)) sum_{t<T_merge} alpha_t^2
    double total = 0;
    bool step_condition_ok = true;  // eta L <= 1/4
};

Theorem1Bound theorem1_rhs(const TheoryProbe& probe, const Theorem1Inputs& in);

// Empirical variance of the N-averaged shared-block gradient estimator.
struct VarianceRow {
    int n = 1;
    double shared_var = 0;
    double expert_var = 0;
};
std::vector<VarianceRow> variance_reduction_check(const ToyProblem& p, const BlockVec& at,
                                                  const std::vector<int>& n_values, int reps,
                                                  int batch, uint64_t seed);

// Mini SPES simulator with inner SGD on the toy suite: per-step drift check
// against eta^2 h^2 G_meas^2 and per-round full-gradient norms.
struct ToyRunResult {
    std::vector<double> grad_sq_per_round;  // ||grad F(theta^(t))||^2 at round entry
    double avg_grad_sq = 0;
    bool drift_ok = true;
    double max_drift_ratio = 0;  // max over (t,h) of drift / (eta^2 h^2 G_meas^2)
    double G_meas = 0;
    double final_loss = 0;
};
ToyRunResult run_toy_spes(const ToyProblem& p, double eta, int H, int N, int T, int batch,
                          uint64_t seed);

}  // namespace spes
