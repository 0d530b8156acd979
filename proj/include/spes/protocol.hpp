#pragma once

#include <map>
#include <optional>
#include <set>

#include "spes/merging.hpp"
#include "spes/trainer.hpp"
#include "spes/wire.hpp"

namespace spes {

// Synchronization-level configuration shared (and hash-checked) between the
// server and every worker.
struct SyncConfig {
    ModelConfig model;
    int nodes = 1;
    int rounds = 1;
    bool diloco = false;  // full-model deltas + outer optimizer instead of sparse sync
    OuterKind outer_kind = OuterKind::SGD;
    double outer_lr = 1.0;
    double outer_momentum = 0.9;
    MergeSchedule merge;
    uint64_t config_hash = 0;
    // Invoked on the server after each aggregation (and merge), before broadcast.
    std::function<void(int round, const ModelParams&)> on_aggregate;
};

// Transport-agnostic byte accounting: payload + 18-byte header per message.
struct CommLedger {
    struct Entry {
        uint64_t up = 0, down = 0;
    };
    std::map<std::pair<int, int>, Entry> per_node_round;  // (node, round)
    uint64_t total_up = 0, total_down = 0;
    uint64_t pushes = 0, broadcasts = 0;

    void add_up(int node, int round, uint64_t bytes) {
        per_node_round[{node, round}].up += bytes;
        total_up += bytes;
    }
    void add_down(int node, int round, uint64_t bytes) {
        per_node_round[{node, round}].down += bytes;
        total_down += bytes;
    }
    uint64_t round_total(int round) const {
        uint64_t t = 0;
        for (const auto& [key, e] : per_node_round)
            if (key.second == round) t += e.up + e.down;
        return t;
    }
};

struct Outgoing {
    int conn = 0;
    std::vector<uint8_t> bytes;
};

// Parameter-server state machine. Messages go in as raw frames, replies come
// out as raw frames; transports only move bytes. Aggregation fires exactly
// when all N updates for the current round have arrived, in node-id order,
// so the result is independent of message interleaving.
class Server {
public:
    Server(SyncConfig config, ModelParams init);

    std::vector<Outgoing> on_bytes(int conn, std::span<const uint8_t> bytes);

    bool finished() const { return done_; }
    const ModelParams& global() const { return global_; }
    int current_round() const { return round_; }
    const CommLedger& ledger() const { return ledger_; }
    const std::vector<std::vector<MergeEvent>>& merge_log() const { return merge_log_; }
    int nodes_joined() const { return static_cast<int>(conn_to_node_.size()); }

private:
    std::vector<Outgoing> handle(int conn, const WireMessage& msg);
    std::vector<Outgoing> broadcast_global(uint32_t round);
    void aggregate();
    void validate_update_blocks(int node, const std::vector<NamedBlock>& blocks) const;

    SyncConfig cfg_;
    ModelParams global_;
    std::vector<std::vector<int>> partition_;
    std::map<int, int> conn_to_node_;
    std::map<int, int> node_to_conn_;
    int round_ = 0;  // 0 until all nodes joined; then 1..rounds
    std::map<int, std::vector<NamedBlock>> pending_;  // node -> update for round_
    std::set<int> byes_;
    bool done_ = false;
    CommLedger ledger_;
    std::vector<std::vector<MergeEvent>> merge_log_;  // per aggregated round
    std::optional<OuterOptimizer> outer_;
};

// Worker-side state machine around local_round().
class Worker {
public:
    struct Options {
        LocalRoundConfig round;
        bool carry_state = false;
    };

    Worker(SyncConfig config, int node_id, Options opts, BatchProvider batches);

    std::vector<uint8_t> hello() const;
    // Feed one server frame; returns zero or more reply frames.
    std::vector<std::vector<uint8_t>> on_bytes(std::span<const uint8_t> bytes);

    bool finished() const { return done_; }
    const ModelParams& model() const { return model_; }
    const TrainMask& mask() const { return mask_; }
    const std::vector<std::vector<LossBundle>>& round_losses() const { return round_losses_; }
    int64_t grad_scalar_count() const { return grad_scalar_count_; }
    int64_t optimizer_scalar_count() const {
        return carried_ ? carried_->state_scalar_count() : last_state_scalars_;
    }

private:
    SyncConfig cfg_;
    int node_id_;
    Options opts_;
    BatchProvider batches_;
    TrainMask mask_;
    ModelParams model_;
    bool assigned_ = false;
    bool done_ = false;
    std::optional<MaskedAdamW> carried_;
    int64_t grad_scalar_count_ = 0;
    int64_t last_state_scalars_ = 0;
    std::vector<std::vector<LossBundle>> round_losses_;
};

// Update payload for node i: all shared blocks plus owned experts, nothing else.
std::vector<NamedBlock> sparse_update_blocks(const ModelParams& params, const TrainMask& mask);

struct RoundMetrics {
    int round = 0;
    double mean_total = 0, mean_ce = 0, mean_lb = 0, mean_moe_z = 0, mean_z = 0;
    double merge_displacement_sq = 0;
    uint64_t bytes_up = 0, bytes_down = 0;
};

struct RunResult {
    ModelParams final_model;
    CommLedger ledger;
    std::vector<RoundMetrics> rounds;
    std::vector<std::vector<MergeEvent>> merges;
    int64_t grad_scalar_count = 0;       // per node (node 0)
    int64_t optimizer_scalar_count = 0;  // per node (node 0)
};

// Shared by both transports once all traffic has drained.
RunResult assemble_run_result(const Server& server, const std::vector<Worker*>& workers);

// Deterministic single-threaded driver over the in-process transport.
RunResult run_inproc(const SyncConfig& config, const ModelParams& init,
                     const Worker::Options& worker_opts,
                     const std::function<BatchProvider(int)>& batches_for_node);

// Same protocol over localhost TCP; workers run as threads in this process.
RunResult run_socket(const SyncConfig& config, const ModelParams& init,
                     const Worker::Options& worker_opts,
                     const std::function<BatchProvider(int)>& batches_for_node, uint16_t port,
                     int timeout_ms = 600000);

}  // namespace spes
