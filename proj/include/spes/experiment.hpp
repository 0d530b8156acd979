#pragma once

#include <string>

#include "spes/corpus.hpp"
#include "spes/cost.hpp"
#include "spes/protocol.hpp"

namespace spes {

enum class Paradigm { Centralized, Diloco, Spes };

std::string paradigm_name(Paradigm p);
Paradigm paradigm_from_name(const std::string& s);

// Linear warmup to peak, then cosine decay to min_frac * peak.
struct LrSchedule {
    double peak = 1e-3;
    int64_t warmup_steps = 0;
    double min_frac = 0.1;
    int64_t total_steps = 1;

    double at(int64_t step) const;
};

struct ExperimentConfig {
    std::string name = "run";
    int schema_version = 1;
    ModelConfig model;
    Paradigm paradigm = Paradigm::Spes;
    int nodes = 1;
    int local_steps = 1;  // H
    int rounds = 1;       // T
    int64_t batch = 4;    // sequences per node per inner step
    LrSchedule lr;
    AdamWConfig opt;  // lr field is driven by the schedule
    InnerOpt inner = InnerOpt::AdamW;
    bool carry_state = false;
    OuterKind outer_kind = OuterKind::Nesterov;
    double outer_lr = 0.7;
    double outer_momentum = 0.9;
    MergeSchedule merge;
    ShardPolicy shard_policy = ShardPolicy::Random;
    uint64_t seed = 1;
    uint64_t corpus_seed = 2;
    int corpus_sources = 4;
    int64_t corpus_sequences = 256;
    int64_t seq_len = 16;
    double corpus_skew = 0.0;  // unigram separation between sources
    int eval_every = 0;  // rounds between specialization checkpoints; 0 = off
    bool socket_transport = false;  // localhost TCP instead of in-process
    uint16_t socket_port = 0;       // 0 = ephemeral

    // centralized forces N = 1, H = 1 and fills the schedule length.
    void normalize();
    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
    uint64_t hash() const;  // FNV-1a over the canonical JSON
};

struct EvalPoint {
    int round = 0;
    double eval_loss = 0;
    double mi = 0;  // max over layers of MI(source; top-1 expert), nats
    std::vector<int64_t> top1_counts;  // last layer, per expert
};

struct ExperimentResult {
    std::string dir;  // metrics directory (empty when not persisted)
    std::vector<RoundMetrics> rounds;
    std::vector<EvalPoint> evals;
    double final_eval_loss = 0;
    ModelParams final_model;
    CommLedger ledger;
    uint64_t config_hash = 0;
};

// Runs the configured paradigm over the in-process transport; when out_root is
// non-empty, writes metrics.csv, evals.csv, manifest.json, cost.json, and a
// final checkpoint under out_root/<name>/.
ExperimentResult run_experiment(const ExperimentConfig& config, const std::string& out_root = "");

// MI(source id; top-k=1 expert choice) per layer on a probe batch.
std::vector<double> specialization_mi(const ModelParams& params, const SyntheticCorpus& corpus,
                                      const std::vector<int64_t>& rows,
                                      std::vector<int64_t>* last_layer_counts = nullptr,
                                      double* eval_loss = nullptr);

struct AblationCell {
    std::string label;
    ExperimentConfig config;
};
struct AblationRow {
    std::string label;
    bool ok = false;
    double final_loss = 0;
    std::string error;
};
// One run per cell; failures are recorded and the grid continues.
std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& grid,
                                      const std::string& out_root);

// Summarizes a finished run directory; writes report.json next to the metrics.
std::string emit_report(const std::string& run_dir);

// Desk-scale preset mirroring the reference hyperparameter structure.
ExperimentConfig preset_paper_2b_like();

}  // namespace spes
