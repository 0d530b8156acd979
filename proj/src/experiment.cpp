#include "spes/experiment.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace spes {

namespace fs = std::filesystem;
using nlohmann::json;

std::string paradigm_name(Paradigm p) {
    switch (p) {
        case Paradigm::Centralized: return "centralized";
        case Paradigm::Diloco: return "diloco";
        case Paradigm::Spes: return "spes";
    }
    return "spes";
}

Paradigm paradigm_from_name(const std::string& s) {
    if (s == "centralized") return Paradigm::Centralized;
    if (s == "diloco") return Paradigm::Diloco;
    if (s == "spes") return Paradigm::Spes;
    throw std::invalid_argument("unknown paradigm: " + s);
}

double LrSchedule::at(int64_t step) const {
    if (warmup_steps > 0 && step < warmup_steps)
        return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    double lo = peak * min_frac;
    int64_t span = total_steps - warmup_steps;
    if (span <= 0) return peak;
    double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
    progress = std::min(1.0, std::max(0.0, progress));
    return lo + (peak - lo) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void ExperimentConfig::normalize() {
    if (paradigm == Paradigm::Centralized) {
        nodes = 1;
        local_steps = 1;
        merge.warmup_rounds = 0;
    }
    if (paradigm == Paradigm::Diloco) merge.warmup_rounds = 0;
    lr.total_steps = static_cast<int64_t>(rounds) * local_steps;
    model.validate();
    if (nodes < 1 || local_steps < 1 || rounds < 1 || batch < 1)
        throw std::invalid_argument("experiment config: N, H, T, batch must be >= 1");
}

std::string ExperimentConfig::to_json() const {
    json j;
    j["name"] = name;
    j["schema_version"] = schema_version;
    j["model"] = {{"vocab", model.vocab},
                  {"hidden", model.hidden},
                  {"intermediate", model.intermediate},
                  {"layers", model.layers},
                  {"experts_total", model.experts_total},
                  {"experts_active", model.experts_active},
                  {"renormalize_after_topk", model.renormalize_after_topk},
                  {"tied_head", model.tied_head},
                  {"loss", {{"ce", model.loss.ce},
                            {"lb", model.loss.lb},
                            {"moe_z", model.loss.moe_z},
                            {"z", model.loss.z}}}};
    j["paradigm"] = paradigm_name(paradigm);
    j["nodes"] = nodes;
    j["local_steps"] = local_steps;
    j["rounds"] = rounds;
    j["batch"] = batch;
    j["lr"] = {{"peak", lr.peak},
               {"warmup_steps", lr.warmup_steps},
               {"min_frac", lr.min_frac},
               {"total_steps", lr.total_steps}};
    j["opt"] = {{"beta1", opt.beta1},
                {"beta2", opt.beta2},
                {"eps", opt.eps},
                {"weight_decay", opt.weight_decay}};
    j["inner"] = inner == InnerOpt::AdamW ? "adamw" : "sgd";
    j["carry_state"] = carry_state;
    j["outer"] = {{"kind", outer_kind == OuterKind::SGD ? "sgd" : "nesterov"},
                  {"lr", outer_lr},
                  {"momentum", outer_momentum}};
    j["merge"] = {{"warmup_rounds", merge.warmup_rounds},
                  {"interval", merge.interval},
                  {"alpha0", merge.alpha0},
                  {"peers", merge.peers},
                  {"source", merge.source == SimilaritySource::Gate
                                 ? "gate"
                                 : (merge.source == SimilaritySource::Up ? "up" : "concat")}};
    j["shard_policy"] = shard_policy == ShardPolicy::Random ? "random" : "by_source";
    j["seed"] = seed;
    j["corpus"] = {{"seed", corpus_seed},
                   {"sources", corpus_sources},
                   {"sequences", corpus_sequences},
                   {"seq_len", seq_len},
                   {"skew", corpus_skew}};
    j["eval_every"] = eval_every;
    j["transport"] = socket_transport ? "socket" : "inproc";
    j["socket_port"] = socket_port;
    return j.dump();
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    ExperimentConfig c;
    c.name = j.value("name", c.name);
    c.schema_version = j.value("schema_version", 1);
    if (j.contains("model")) {
        const json& m = j["model"];
        c.model.vocab = m.value("vocab", c.model.vocab);
        c.model.hidden = m.value("hidden", c.model.hidden);
        c.model.intermediate = m.value("intermediate", c.model.intermediate);
        c.model.layers = m.value("layers", c.model.layers);
        c.model.experts_total = m.value("experts_total", c.model.experts_total);
        c.model.experts_active = m.value("experts_active", c.model.experts_active);
        c.model.renormalize_after_topk =
            m.value("renormalize_after_topk", c.model.renormalize_after_topk);
        c.model.tied_head = m.value("tied_head", c.model.tied_head);
        if (m.contains("loss")) {
            const json& l = m["loss"];
            c.model.loss.ce = l.value("ce", c.model.loss.ce);
            c.model.loss.lb = l.value("lb", c.model.loss.lb);
            c.model.loss.moe_z = l.value("moe_z", c.model.loss.moe_z);
            c.model.loss.z = l.value("z", c.model.loss.z);
        }
    }
    c.paradigm = paradigm_from_name(j.value("paradigm", std::string("spes")));
    c.nodes = j.value("nodes", c.nodes);
    c.local_steps = j.value("local_steps", c.local_steps);
    c.rounds = j.value("rounds", c.rounds);
    c.batch = j.value("batch", c.batch);
    if (j.contains("lr")) {
        const json& l = j["lr"];
        c.lr.peak = l.value("peak", c.lr.peak);
        c.lr.warmup_steps = l.value("warmup_steps", c.lr.warmup_steps);
        c.lr.min_frac = l.value("min_frac", c.lr.min_frac);
        c.lr.total_steps = l.value("total_steps", c.lr.total_steps);
    }
    if (j.contains("opt")) {
        const json& o = j["opt"];
        c.opt.beta1 = o.value("beta1", c.opt.beta1);
        c.opt.beta2 = o.value("beta2", c.opt.beta2);
        c.opt.eps = o.value("eps", c.opt.eps);
        c.opt.weight_decay = o.value("weight_decay", c.opt.weight_decay);
    }
    c.inner = j.value("inner", std::string("adamw")) == "sgd" ? InnerOpt::SGD : InnerOpt::AdamW;
    c.carry_state = j.value("carry_state", c.carry_state);
    if (j.contains("outer")) {
        const json& o = j["outer"];
        c.outer_kind = o.value("kind", std::string("nesterov")) == "sgd" ? OuterKind::SGD
                                                                         : OuterKind::Nesterov;
        c.outer_lr = o.value("lr", c.outer_lr);
        c.outer_momentum = o.value("momentum", c.outer_momentum);
    }
    if (j.contains("merge")) {
        const json& m = j["merge"];
        c.merge.warmup_rounds = m.value("warmup_rounds", c.merge.warmup_rounds);
        c.merge.interval = m.value("interval", c.merge.interval);
        c.merge.alpha0 = m.value("alpha0", c.merge.alpha0);
        c.merge.peers = m.value("peers", c.merge.peers);
        std::string src = m.value("source", std::string("gate"));
        c.merge.source = src == "up" ? SimilaritySource::Up
                                     : (src == "concat" ? SimilaritySource::Concat
                                                        : SimilaritySource::Gate);
    }
    c.shard_policy = j.value("shard_policy", std::string("random")) == "by_source"
                         ? ShardPolicy::BySource
                         : ShardPolicy::Random;
    c.seed = j.value("seed", c.seed);
    if (j.contains("corpus")) {
        const json& k = j["corpus"];
        c.corpus_seed = k.value("seed", c.corpus_seed);
        c.corpus_sources = k.value("sources", c.corpus_sources);
        c.corpus_skew = k.value("skew", c.corpus_skew);
        c.corpus_sequences = k.value("sequences", c.corpus_sequences);
        c.seq_len = k.value("seq_len", c.seq_len);
    }
    c.eval_every = j.value("eval_every", c.eval_every);
    c.socket_transport = j.value("transport", std::string("inproc")) == "socket";
    c.socket_port = static_cast<uint16_t>(j.value("socket_port", 0));
    return c;
}

uint64_t ExperimentConfig::hash() const {
    std::string text = to_json();
    uint64_t h = 14695981039346656037ull;  // FNV-1a
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

// ---- specialization probe ----

std::vector<double> specialization_mi(const ModelParams& params, const SyntheticCorpus& corpus,
                                      const std::vector<int64_t>& rows,
                                      std::vector<int64_t>* last_layer_counts,
                                      double* eval_loss) {
    Batch batch = corpus.make_batch(rows);
    auto lg = build_loss(params, batch, [](const BlockDesc&) { return false; });
    if (eval_loss) *eval_loss = static_cast<double>(lg.g.value(lg.total).data[0]);
    int sources = static_cast<int>(corpus.sources.size());
    int experts = params.config.experts_total;
    int64_t seq = batch.seq;
    std::vector<double> mi_per_layer;
    for (size_t l = 0; l < lg.routing.size(); ++l) {
        const RoutingDecision& rd = lg.routing[l];
        std::vector<int64_t> joint(static_cast<size_t>(sources * experts), 0);
        int64_t tokens = rd.probs.rows();
        for (int64_t t = 0; t < tokens; ++t) {
            int64_t row = rows[static_cast<size_t>(t / seq)];
            int src = corpus.source_id[static_cast<size_t>(row)];
            int top1 = 0;
            for (int j = 1; j < experts; ++j)
                if (rd.probs.at(t, j) > rd.probs.at(t, top1)) top1 = j;
            ++joint[static_cast<size_t>(src * experts + top1)];
        }
        double n = static_cast<double>(tokens);
        std::vector<double> ps(static_cast<size_t>(sources), 0), pe(static_cast<size_t>(experts), 0);
        for (int s = 0; s < sources; ++s)
            for (int j = 0; j < experts; ++j) {
                double p = joint[static_cast<size_t>(s * experts + j)] / n;
                ps[static_cast<size_t>(s)] += p;
                pe[static_cast<size_t>(j)] += p;
            }
        double mi = 0;
        for (int s = 0; s < sources; ++s)
            for (int j = 0; j < experts; ++j) {
                double p = joint[static_cast<size_t>(s * experts + j)] / n;
                if (p > 0)
                    mi += p * std::log(p / (ps[static_cast<size_t>(s)] * pe[static_cast<size_t>(j)]));
            }
        mi_per_layer.push_back(mi);
        if (last_layer_counts && l + 1 == lg.routing.size()) {
            last_layer_counts->assign(static_cast<size_t>(experts), 0);
            for (int s = 0; s < sources; ++s)
                for (int j = 0; j < experts; ++j)
                    (*last_layer_counts)[static_cast<size_t>(j)] +=
                        joint[static_cast<size_t>(s * experts + j)];
        }
    }
    return mi_per_layer;
}

// ---- runner ----

namespace {

std::vector<int64_t> probe_rows(const SyntheticCorpus& corpus, int64_t max_rows = 64) {
    int64_t n = corpus.sequences();
    int64_t take = std::min(n, max_rows);
    std::vector<int64_t> rows;
    for (int64_t i = 0; i < take; ++i) rows.push_back(i * n / take);
    return rows;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config_in, const std::string& out_root) {
    ExperimentConfig cfg = config_in;
    cfg.normalize();
    ExperimentResult res;
    res.config_hash = cfg.hash();

    SyntheticCorpus corpus = gen_corpus(cfg.model.vocab, cfg.seq_len, cfg.corpus_sources,
                                        cfg.corpus_sequences, cfg.corpus_seed, cfg.corpus_skew);
    auto shards = shard_corpus(corpus, cfg.nodes, cfg.shard_policy, cfg.seed);
    std::vector<int64_t> probe = probe_rows(corpus);
    ModelParams init = init_model<float>(cfg.model, cfg.seed);

    LrSchedule sched = cfg.lr;
    auto lr_at = [sched](int64_t step) { return sched.at(step); };
    int64_t tokens_per_round =
        static_cast<int64_t>(cfg.nodes) * cfg.local_steps * cfg.batch * cfg.seq_len;

    std::vector<double> wall_ms;
    auto eval_model = [&](int round, const ModelParams& m) {
        EvalPoint ev;
        ev.round = round;
        auto mi = specialization_mi(m, corpus, probe, &ev.top1_counts, &ev.eval_loss);
        for (double v : mi) ev.mi = std::max(ev.mi, v);
        res.evals.push_back(std::move(ev));
    };

    if (cfg.paradigm == Paradigm::Centralized) {
        TrainMask mask = TrainMask::all(cfg.model);
        MaskedAdamW carried(cfg.model, mask);
        BatchProvider provider =
            make_batch_provider(corpus, shards[0], cfg.batch, cfg.seed + 1007);
        ModelParams params = init;
        for (int t = 0; t < cfg.rounds; ++t) {
            auto t0 = std::chrono::steady_clock::now();
            LocalRoundConfig rc;
            rc.steps = 1;
            rc.opt = cfg.opt;
            rc.inner = cfg.inner;
            rc.lr_at = lr_at;
            rc.first_step = t;
            auto r = local_round(params, provider, rc, mask,
                                 cfg.inner == InnerOpt::AdamW ? &carried : nullptr);
            params = std::move(r.params);
            RoundMetrics m;
            m.round = t + 1;
            m.mean_total = r.step_losses[0].total;
            m.mean_ce = r.step_losses[0].ce;
            m.mean_lb = r.step_losses[0].lb;
            m.mean_moe_z = r.step_losses[0].moe_z;
            m.mean_z = r.step_losses[0].z;
            res.rounds.push_back(m);
            wall_ms.push_back(std::chrono::duration<double, std::milli>(
                                  std::chrono::steady_clock::now() - t0)
                                  .count());
            if (cfg.eval_every > 0 && (t + 1) % cfg.eval_every == 0) eval_model(t + 1, params);
        }
        res.final_model = std::move(params);
    } else {
        SyncConfig sc;
        sc.model = cfg.model;
        sc.nodes = cfg.nodes;
        sc.rounds = cfg.rounds;
        sc.diloco = cfg.paradigm == Paradigm::Diloco;
        sc.outer_kind = cfg.outer_kind;
        sc.outer_lr = cfg.outer_lr;
        sc.outer_momentum = cfg.outer_momentum;
        sc.merge = cfg.merge;
        sc.config_hash = res.config_hash;
        auto t_round = std::make_shared<std::chrono::steady_clock::time_point>(
            std::chrono::steady_clock::now());
        sc.on_aggregate = [&, t_round](int round, const ModelParams& m) {
            auto now = std::chrono::steady_clock::now();
            wall_ms.push_back(std::chrono::duration<double, std::milli>(now - *t_round).count());
            *t_round = now;
            if (cfg.eval_every > 0 && round % cfg.eval_every == 0) eval_model(round, m);
        };
        Worker::Options wo;
        wo.round.steps = cfg.local_steps;
        wo.round.opt = cfg.opt;
        wo.round.inner = cfg.inner;
        wo.round.lr_at = lr_at;
        wo.carry_state = cfg.carry_state;
        auto batches_for_node = [&](int n) {
            return make_batch_provider(corpus, shards[static_cast<size_t>(n)], cfg.batch,
                                       cfg.seed + 1007 + 31 * static_cast<uint64_t>(n));
        };
        RunResult rr = cfg.socket_transport
                           ? run_socket(sc, init, wo, batches_for_node, cfg.socket_port)
                           : run_inproc(sc, init, wo, batches_for_node);
        res.rounds = std::move(rr.rounds);
        res.ledger = std::move(rr.ledger);
        res.final_model = std::move(rr.final_model);
    }

    double final_loss = 0;
    specialization_mi(res.final_model, corpus, probe, nullptr, &final_loss);
    res.final_eval_loss = final_loss;

    if (!out_root.empty()) {
        fs::path dir = fs::path(out_root) / cfg.name;
        fs::create_directories(dir);
        res.dir = dir.string();

        std::ostringstream csv;
        csv << "round,tokens_seen,total,ce,lb,moe_z,z,bytes_up,bytes_down,merge_displacement_sq,"
               "wall_ms\n";
        for (size_t i = 0; i < res.rounds.size(); ++i) {
            const RoundMetrics& m = res.rounds[i];
            csv << m.round << ',' << tokens_per_round * m.round << ',' << m.mean_total << ','
                << m.mean_ce << ',' << m.mean_lb << ',' << m.mean_moe_z << ',' << m.mean_z << ','
                << m.bytes_up << ',' << m.bytes_down << ',' << m.merge_displacement_sq << ','
                << (i < wall_ms.size() ? wall_ms[i] : 0.0) << '\n';
        }
        write_file(dir / "metrics.csv", csv.str());

        std::ostringstream ecsv;
        ecsv << "round,eval_loss,mi,top1_counts\n";
        for (const EvalPoint& ev : res.evals) {
            ecsv << ev.round << ',' << ev.eval_loss << ',' << ev.mi << ',';
            for (size_t j = 0; j < ev.top1_counts.size(); ++j)
                ecsv << (j ? ";" : "") << ev.top1_counts[j];
            ecsv << '\n';
        }
        write_file(dir / "evals.csv", ecsv.str());

        json manifest;
        manifest["config"] = json::parse(cfg.to_json());
        manifest["config_hash"] = res.config_hash;
        manifest["schema_version"] = cfg.schema_version;
        manifest["final_eval_loss"] = res.final_eval_loss;
        manifest["choices"] = {{"similarity_source", "gate"},
                               {"gate_probs_for_aux_losses", "full_softmax_pre_topk"},
                               {"lb_form", "M * sum_j f_j * P_j"},
                               {"partition", "contiguous_balanced"}};
        write_file(dir / "manifest.json", manifest.dump(2));

        ShapeSpec shape;
        shape.model = cfg.model;
        shape.nodes = cfg.nodes;
        write_file(dir / "cost.json", cost_report(shape).to_json());

        write_checkpoint((dir / "checkpoint.bin").string(), res.final_model,
                         static_cast<uint64_t>(cfg.rounds));
    }
    return res;
}

std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& grid,
                                      const std::string& out_root) {
    std::vector<AblationRow> rows;
    std::ostringstream csv;
    csv << "label,ok,final_loss,error\n";
    for (const AblationCell& cell : grid) {
        AblationRow row;
        row.label = cell.label;
        try {
            ExperimentResult r = run_experiment(cell.config, out_root);
            row.ok = true;
            row.final_loss = r.final_eval_loss;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
        }
        csv << row.label << ',' << (row.ok ? 1 : 0) << ',' << row.final_loss << ",\""
            << row.error << "\"\n";
        rows.push_back(std::move(row));
    }
    if (!out_root.empty()) {
        fs::create_directories(out_root);
        write_file(fs::path(out_root) / "ablation.csv", csv.str());
    }
    return rows;
}

std::string emit_report(const std::string& run_dir) {
    fs::path dir(run_dir);
    std::ifstream metrics(dir / "metrics.csv");
    json report;
    std::ostringstream text;
    if (!metrics) {
        report["rounds"] = 0;
        report["status"] = "no rounds";
        text << "no rounds: " << run_dir << " has no metrics.csv\n";
        if (fs::exists(dir)) write_file(dir / "report.json", report.dump(2));
        return text.str();
    }
    std::string line;
    std::getline(metrics, line);  // header
    int rounds = 0;
    double final_total = 0;
    uint64_t bytes_up = 0, bytes_down = 0;
    double sum_total = 0;
    while (std::getline(metrics, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() < 11) throw std::runtime_error("corrupt metrics row: " + line);
        ++rounds;
        final_total = std::stod(cells[2]);
        sum_total += final_total;
        bytes_up += std::stoull(cells[7]);
        bytes_down += std::stoull(cells[8]);
    }
    report["rounds"] = rounds;
    if (rounds == 0) {
        report["status"] = "no rounds";
        text << "no rounds recorded in " << run_dir << "\n";
    } else {
        report["status"] = "ok";
        report["final_total_loss"] = final_total;
        report["sum_total_loss"] = sum_total;
        report["bytes_up_total"] = bytes_up;
        report["bytes_down_total"] = bytes_down;
        text << "rounds: " << rounds << "\nfinal total loss: " << final_total
             << "\nbytes up: " << bytes_up << "\nbytes down: " << bytes_down << "\n";
        std::ifstream cost(dir / "cost.json");
        if (cost) {
            json cj = json::parse(cost);
            report["cost"] = cj;
            text << "analytic comm ratio (spes/diloco): " << cj.value("comm_ratio", 0.0) << "\n";
        }
    }
    write_file(dir / "report.json", report.dump(2));
    return text.str();
}

ExperimentConfig preset_paper_2b_like() {
    ExperimentConfig c;
    c.name = "paper-2b-like";
    c.model.vocab = 256;
    c.model.hidden = 48;
    c.model.intermediate = 96;
    c.model.layers = 2;
    c.model.experts_total = 16;
    c.model.experts_active = 4;
    c.model.renormalize_after_topk = true;
    c.paradigm = Paradigm::Spes;
    c.nodes = 4;
    c.local_steps = 100;            // reference H before the late-phase switch
    c.rounds = 25;
    c.batch = 8;
    c.seq_len = 32;
    c.corpus_sources = 16;
    c.corpus_sequences = 512;
    c.lr.peak = 3e-3;
    c.lr.warmup_steps = 100;        // warmup scaled to the desk budget
    c.merge.warmup_rounds = 125;    // 12500 steps / H
    c.merge.interval = 5;           // 500 steps / H
    c.merge.alpha0 = 0.1;
    c.merge.peers = 4;
    c.shard_policy = ShardPolicy::BySource;
    c.eval_every = 5;
    return c;
}

}  // namespace spes
