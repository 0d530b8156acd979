#include "spes/protocol.hpp"

#include <deque>
#include <memory>

namespace spes {

namespace {

ModelParams empty_model(const ModelConfig& c) {
    ModelParams p;
    p.config = c;
    p.shared.embedding = Tensor::zeros({c.vocab, c.hidden});
    for (int l = 0; l < c.layers; ++l) {
        p.shared.norm_gain.push_back(Tensor::zeros({c.hidden}));
        p.shared.router.push_back(Tensor::zeros({c.hidden, c.experts_total}));
    }
    if (!c.tied_head) p.shared.head = Tensor::zeros({c.hidden, c.vocab});
    p.experts.resize(static_cast<size_t>(c.layers));
    for (int l = 0; l < c.layers; ++l)
        for (int j = 0; j < c.experts_total; ++j)
            p.experts[static_cast<size_t>(l)].push_back(
                {Tensor::zeros({c.hidden, c.intermediate}),
                 Tensor::zeros({c.hidden, c.intermediate}),
                 Tensor::zeros({c.intermediate, c.hidden})});
    return p;
}

std::vector<uint8_t> frame(MsgKind kind, uint32_t round, std::vector<uint8_t> payload = {}) {
    WireMessage msg;
    msg.kind = kind;
    msg.round = round;
    msg.payload = std::move(payload);
    return encode_message(msg);
}

}  // namespace

std::vector<NamedBlock> sparse_update_blocks(const ModelParams& params, const TrainMask& mask) {
    std::vector<NamedBlock> out;
    for (const auto& b : enumerate_blocks(params.config))
        if (mask.trainable(b)) out.push_back({b.name, block_tensor(params, b)});
    return out;
}

// ---- server ----

Server::Server(SyncConfig config, ModelParams init) : cfg_(std::move(config)), global_(std::move(init)) {
    cfg_.model.validate();
    if (cfg_.nodes < 1) throw std::invalid_argument("server: need at least one node");
    if (cfg_.rounds < 1) throw std::invalid_argument("server: need at least one round");
    partition_ = param_partition(cfg_.model, cfg_.nodes);
    if (cfg_.diloco) outer_.emplace(cfg_.outer_kind, cfg_.outer_lr, cfg_.outer_momentum);
}

std::vector<Outgoing> Server::on_bytes(int conn, std::span<const uint8_t> bytes) {
    WireMessage msg = decode_message(bytes);
    auto it = conn_to_node_.find(conn);
    int node = it == conn_to_node_.end() ? -1 : it->second;
    ledger_.add_up(node, static_cast<int>(msg.round), bytes.size());
    return handle(conn, msg);
}

std::vector<Outgoing> Server::broadcast_global(uint32_t round) {
    std::vector<uint8_t> payload = encode_blocks(model_to_blocks(global_));
    std::vector<Outgoing> out;
    for (const auto& [node, conn] : node_to_conn_) {
        Outgoing o{conn, frame(MsgKind::GlobalModel, round, payload)};
        ledger_.add_down(node, static_cast<int>(round), o.bytes.size());
        ++ledger_.broadcasts;
        out.push_back(std::move(o));
    }
    return out;
}

void Server::validate_update_blocks(int node, const std::vector<NamedBlock>& blocks) const {
    TrainMask mask;
    mask.node_id = node;
    mask.owned_experts = partition_[static_cast<size_t>(node)];
    std::vector<BlockDesc> expected;
    for (const auto& b : enumerate_blocks(cfg_.model)) {
        if (cfg_.diloco || mask.trainable(b)) expected.push_back(b);
    }
    size_t i = 0;
    for (const auto& nb : blocks) {
        // An expert block outside the node's ownership is a distinct breach.
        if (!cfg_.diloco) {
            for (const auto& d : enumerate_blocks(cfg_.model))
                if (d.name == nb.name && d.is_expert() && !mask.owns(d.expert))
                    throw ProtocolError(ProtoError::NotOwnedBlock,
                                        "node " + std::to_string(node) +
                                            " pushed non-owned block " + nb.name);
        }
        if (i >= expected.size() || nb.name != expected[i].name ||
            nb.tensor.shape != expected[i].shape)
            throw ProtocolError(ProtoError::MalformedPayload,
                                "unexpected update block " + nb.name + " from node " +
                                    std::to_string(node));
        ++i;
    }
    if (i != expected.size())
        throw ProtocolError(ProtoError::MalformedPayload,
                            "update from node " + std::to_string(node) + " missing blocks");
}

std::vector<Outgoing> Server::handle(int conn, const WireMessage& msg) {
    std::vector<Outgoing> out;
    switch (msg.kind) {
        case MsgKind::Hello: {
            HelloPayload h = decode_hello(msg.payload);
            if (h.config_hash != cfg_.config_hash)
                throw ProtocolError(ProtoError::ConfigMismatch,
                                    "node " + std::to_string(h.node_id) +
                                        " config hash mismatch");
            int node = static_cast<int>(h.node_id);
            if (node < 0 || node >= cfg_.nodes)
                throw ProtocolError(ProtoError::MalformedPayload,
                                    "node id " + std::to_string(node) + " out of range");
            if (node_to_conn_.count(node))
                throw ProtocolError(ProtoError::UnexpectedMessage,
                                    "node " + std::to_string(node) + " joined twice");
            conn_to_node_[conn] = node;
            node_to_conn_[node] = conn;
            AssignPayload a;
            a.node_id = h.node_id;
            for (int e : partition_[static_cast<size_t>(node)])
                a.experts.push_back(static_cast<uint32_t>(e));
            Outgoing reply{conn, frame(MsgKind::Assign, 0, encode_assign(a))};
            ledger_.add_down(node, 0, reply.bytes.size());
            out.push_back(std::move(reply));
            if (static_cast<int>(node_to_conn_.size()) == cfg_.nodes) {
                round_ = 1;
                for (auto& o : broadcast_global(1)) out.push_back(std::move(o));
            }
            return out;
        }
        case MsgKind::LocalUpdate: {
            auto it = conn_to_node_.find(conn);
            if (it == conn_to_node_.end())
                throw ProtocolError(ProtoError::UnexpectedMessage,
                                    "update from connection without HELLO");
            int node = it->second;
            if (round_ == 0)
                throw ProtocolError(ProtoError::BarrierViolation,
                                    "update before all nodes joined");
            if (static_cast<int>(msg.round) != round_)
                throw ProtocolError(ProtoError::RoundMismatch,
                                    "node " + std::to_string(node) + " pushed round " +
                                        std::to_string(msg.round) + " during round " +
                                        std::to_string(round_));
            if (pending_.count(node))
                throw ProtocolError(ProtoError::DuplicatePush,
                                    "node " + std::to_string(node) +
                                        " pushed twice in round " + std::to_string(round_));
            std::vector<NamedBlock> blocks = decode_blocks(msg.payload);
            validate_update_blocks(node, blocks);
            pending_[node] = std::move(blocks);
            ++ledger_.pushes;
            Outgoing ack{conn, frame(MsgKind::RoundDone, static_cast<uint32_t>(round_))};
            ledger_.add_down(node, round_, ack.bytes.size());
            out.push_back(std::move(ack));
            if (static_cast<int>(pending_.size()) == cfg_.nodes) {
                aggregate();
                pending_.clear();
                if (round_ < cfg_.rounds) {
                    ++round_;
                    for (auto& o : broadcast_global(static_cast<uint32_t>(round_)))
                        out.push_back(std::move(o));
                } else {
                    // Final model, then goodbye.
                    for (auto& o : broadcast_global(static_cast<uint32_t>(cfg_.rounds + 1)))
                        out.push_back(std::move(o));
                    for (const auto& [n, c] : node_to_conn_) {
                        Outgoing bye{c, frame(MsgKind::Bye, static_cast<uint32_t>(cfg_.rounds + 1))};
                        ledger_.add_down(n, cfg_.rounds + 1, bye.bytes.size());
                        out.push_back(std::move(bye));
                    }
                }
            }
            return out;
        }
        case MsgKind::Bye: {
            auto it = conn_to_node_.find(conn);
            if (it == conn_to_node_.end())
                throw ProtocolError(ProtoError::UnexpectedMessage, "BYE before HELLO");
            byes_.insert(it->second);
            if (static_cast<int>(byes_.size()) == cfg_.nodes) done_ = true;
            return out;
        }
        default:
            throw ProtocolError(ProtoError::UnexpectedMessage,
                                "server cannot handle message kind " +
                                    std::to_string(static_cast<int>(msg.kind)));
    }
}

void Server::aggregate() {
    auto blocks = enumerate_blocks(cfg_.model);
    if (cfg_.diloco) {
        std::vector<ModelParams> locals;
        locals.reserve(pending_.size());
        for (const auto& [node, nb] : pending_) {
            ModelParams lp = empty_model(cfg_.model);
            blocks_into_model(lp, nb);
            locals.push_back(std::move(lp));
        }
        std::vector<const ModelParams*> ptrs;
        for (const auto& lp : locals) ptrs.push_back(&lp);
        outer_->step(global_, ptrs);
        merge_log_.emplace_back();  // no merging in the full-sync baseline
        if (cfg_.on_aggregate) cfg_.on_aggregate(round_, global_);
        return;
    }

    // Sparse aggregation: shared blocks are the node mean (accumulated in
    // double, node-id order, so the result is transport-independent); each
    // expert block comes verbatim from its unique owner.
    std::vector<int> node_ids;
    std::vector<std::map<std::string, const Tensor*>> index;
    for (const auto& [node, nb] : pending_) {
        node_ids.push_back(node);
        std::map<std::string, const Tensor*> m;
        for (const auto& b : nb) m[b.name] = &b.tensor;
        index.push_back(std::move(m));
    }
    double inv_n = 1.0 / static_cast<double>(node_ids.size());
    for (const auto& d : blocks) {
        Tensor& dst = block_tensor(global_, d);
        if (d.is_expert()) {
            for (size_t i = 0; i < node_ids.size(); ++i) {
                auto it = index[i].find(d.name);
                if (it != index[i].end()) {
                    dst = *it->second;
                    break;
                }
            }
        } else {
            std::vector<double> acc(dst.data.size(), 0.0);
            for (size_t i = 0; i < node_ids.size(); ++i)
                for (size_t j = 0; j < acc.size(); ++j)
                    acc[j] += static_cast<double>(index[i].at(d.name)->data[j]);
            for (size_t j = 0; j < acc.size(); ++j)
                dst.data[j] = static_cast<float>(acc[j] * inv_n);
        }
    }

    // Merge warm-up, applied after aggregation and before the next broadcast.
    // Round indices for the schedule are zero-based.
    merge_log_.push_back(merge_model(global_, cfg_.merge, round_ - 1));
    if (cfg_.on_aggregate) cfg_.on_aggregate(round_, global_);
}

// ---- worker ----

Worker::Worker(SyncConfig config, int node_id, Options opts, BatchProvider batches)
    : cfg_(std::move(config)),
      node_id_(node_id),
      opts_(std::move(opts)),
      batches_(std::move(batches)),
      model_(empty_model(cfg_.model)) {
    if (node_id < 0 || node_id >= cfg_.nodes)
        throw std::invalid_argument("worker: node id out of range");
}

std::vector<uint8_t> Worker::hello() const {
    HelloPayload h;
    h.node_id = static_cast<uint32_t>(node_id_);
    h.config_hash = cfg_.config_hash;
    return frame(MsgKind::Hello, 0, encode_hello(h));
}

std::vector<std::vector<uint8_t>> Worker::on_bytes(std::span<const uint8_t> bytes) {
    WireMessage msg = decode_message(bytes);
    std::vector<std::vector<uint8_t>> replies;
    switch (msg.kind) {
        case MsgKind::Assign: {
            AssignPayload a = decode_assign(msg.payload);
            if (static_cast<int>(a.node_id) != node_id_)
                throw ProtocolError(ProtoError::MalformedPayload,
                                    "assignment addressed to node " + std::to_string(a.node_id));
            mask_.node_id = node_id_;
            mask_.owned_experts.assign(a.experts.begin(), a.experts.end());
            std::sort(mask_.owned_experts.begin(), mask_.owned_experts.end());
            assigned_ = true;
            int64_t trainable = 0;
            for (const auto& b : enumerate_blocks(cfg_.model))
                if (mask_.trainable(b)) trainable += Tensor::numel_of(b.shape);
            last_state_scalars_ = 2 * trainable;
            if (opts_.carry_state && opts_.round.inner == InnerOpt::AdamW)
                carried_.emplace(cfg_.model, mask_);
            return replies;
        }
        case MsgKind::GlobalModel: {
            if (!assigned_)
                throw ProtocolError(ProtoError::UnexpectedMessage, "model before assignment");
            blocks_into_model(model_, decode_blocks(msg.payload));
            if (static_cast<int>(msg.round) > cfg_.rounds) return replies;  // final model
            LocalRoundConfig round_cfg = opts_.round;
            round_cfg.first_step = static_cast<int64_t>(round_losses_.size()) * round_cfg.steps;
            LocalRoundResult res =
                local_round(model_, batches_, round_cfg, mask_,
                            carried_ ? &*carried_ : nullptr);
            model_ = std::move(res.params);
            grad_scalar_count_ = res.grad_scalar_count;
            round_losses_.push_back(std::move(res.step_losses));
            std::vector<NamedBlock> update = cfg_.diloco ? model_to_blocks(model_)
                                                         : sparse_update_blocks(model_, mask_);
            replies.push_back(frame(MsgKind::LocalUpdate, msg.round, encode_blocks(update)));
            return replies;
        }
        case MsgKind::RoundDone:
            return replies;
        case MsgKind::Bye:
            done_ = true;
            replies.push_back(frame(MsgKind::Bye, msg.round));
            return replies;
        default:
            throw ProtocolError(ProtoError::UnexpectedMessage,
                                "worker cannot handle message kind " +
                                    std::to_string(static_cast<int>(msg.kind)));
    }
}

// ---- drivers ----

RunResult assemble_run_result(const Server& server, const std::vector<Worker*>& workers) {
    RunResult r;
    r.final_model = server.global();
    r.ledger = server.ledger();
    r.merges = server.merge_log();
    if (!workers.empty()) {
        r.grad_scalar_count = workers[0]->grad_scalar_count();
        r.optimizer_scalar_count = workers[0]->optimizer_scalar_count();
        size_t rounds = workers[0]->round_losses().size();
        for (size_t t = 0; t < rounds; ++t) {
            RoundMetrics m;
            m.round = static_cast<int>(t + 1);
            int64_t count = 0;
            for (const Worker* w : workers)
                for (const LossBundle& lb : w->round_losses()[t]) {
                    m.mean_total += lb.total;
                    m.mean_ce += lb.ce;
                    m.mean_lb += lb.lb;
                    m.mean_moe_z += lb.moe_z;
                    m.mean_z += lb.z;
                    ++count;
                }
            if (count > 0) {
                m.mean_total /= count;
                m.mean_ce /= count;
                m.mean_lb /= count;
                m.mean_moe_z /= count;
                m.mean_z /= count;
            }
            if (t < r.merges.size())
                for (const MergeEvent& ev : r.merges[t]) m.merge_displacement_sq += ev.displacement_sq;
            for (const auto& [key, e] : r.ledger.per_node_round)
                if (key.second == m.round) {
                    m.bytes_up += e.up;
                    m.bytes_down += e.down;
                }
            r.rounds.push_back(m);
        }
    }
    return r;
}

RunResult run_inproc(const SyncConfig& config, const ModelParams& init,
                     const Worker::Options& worker_opts,
                     const std::function<BatchProvider(int)>& batches_for_node) {
    Server server(config, init);
    std::vector<std::unique_ptr<Worker>> workers;
    for (int n = 0; n < config.nodes; ++n)
        workers.push_back(std::make_unique<Worker>(config, n, worker_opts, batches_for_node(n)));

    std::deque<std::pair<int, std::vector<uint8_t>>> to_server;
    std::vector<std::deque<std::vector<uint8_t>>> to_worker(static_cast<size_t>(config.nodes));
    for (int n = 0; n < config.nodes; ++n) to_server.push_back({n, workers[n]->hello()});

    auto pending_worker = [&] {
        for (const auto& q : to_worker)
            if (!q.empty()) return true;
        return false;
    };
    while (!to_server.empty() || pending_worker()) {
        while (!to_server.empty()) {
            auto [conn, bytes] = std::move(to_server.front());
            to_server.pop_front();
            for (auto& o : server.on_bytes(conn, bytes))
                to_worker[static_cast<size_t>(o.conn)].push_back(std::move(o.bytes));
        }
        for (int n = 0; n < config.nodes; ++n)
            while (!to_worker[static_cast<size_t>(n)].empty()) {
                auto bytes = std::move(to_worker[static_cast<size_t>(n)].front());
                to_worker[static_cast<size_t>(n)].pop_front();
                for (auto& reply : workers[static_cast<size_t>(n)]->on_bytes(bytes))
                    to_server.push_back({n, std::move(reply)});
            }
    }
    if (!server.finished()) throw std::logic_error("in-process run drained without completing");

    std::vector<Worker*> ptrs;
    for (auto& w : workers) ptrs.push_back(w.get());
    return assemble_run_result(server, ptrs);
}

}  // namespace spes
