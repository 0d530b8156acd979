#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "spes/experiment.hpp"

namespace {

std::string metrics_root(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("SPES_METRICS_ROOT")) return env;
    return "metrics";
}

std::string read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SPES desk-scale decentralized MoE training harness"};
    app.require_subcommand(1);

    // gen-corpus
    auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic Markov-mixture corpus");
    int64_t g_vocab = 64, g_seq = 16, g_sequences = 256;
    int g_sources = 4;
    uint64_t g_seed = 1;
    double g_skew = 0.0;
    std::string g_out = "corpus.csv";
    gen->add_option("--vocab", g_vocab);
    gen->add_option("--seq", g_seq);
    gen->add_option("--sources", g_sources);
    gen->add_option("--sequences", g_sequences);
    gen->add_option("--seed", g_seed);
    gen->add_option("--skew", g_skew, "unigram separation between sources");
    gen->add_option("--out", g_out);

    // run
    auto* run = app.add_subcommand("run", "run one experiment");
    std::string r_config, r_preset, r_out, r_paradigm, r_transport = "inproc";
    uint16_t r_port = 0;
    run->add_option("--config", r_config, "experiment config JSON file");
    run->add_option("--preset", r_preset, "named preset (paper-2b-like)");
    run->add_option("--paradigm", r_paradigm, "centralized | diloco | spes (overrides config)");
    run->add_option("--out", r_out, "metrics root (default $SPES_METRICS_ROOT or ./metrics)");
    run->add_option("--transport", r_transport, "inproc | socket");
    run->add_option("--port", r_port, "TCP port for socket transport (0 = ephemeral)");

    // ablate
    auto* abl = app.add_subcommand("ablate", "grid of runs over H / N / alpha / K / T_merge");
    std::string a_config, a_preset, a_out;
    std::vector<int> a_H, a_N, a_K, a_Tmerge;
    std::vector<double> a_alpha;
    abl->add_option("--config", a_config);
    abl->add_option("--preset", a_preset);
    abl->add_option("--out", a_out);
    abl->add_option("--H", a_H, "local-step values");
    abl->add_option("--N", a_N, "node-count values");
    abl->add_option("--alpha", a_alpha, "merge alpha0 values");
    abl->add_option("--K", a_K, "merge peer-count values");
    abl->add_option("--T-merge", a_Tmerge, "merge warmup-round values");

    // report
    auto* rep = app.add_subcommand("report", "summarize a finished run directory");
    std::string p_dir;
    rep->add_option("--dir", p_dir)->required();

    // cost
    auto* cost = app.add_subcommand("cost", "analytic memory/communication report");
    std::string c_preset;
    int c_nodes = 0;
    int64_t c_vocab = 64, c_hidden = 32, c_inter = 64;
    int c_layers = 2, c_experts = 4, c_active = 2;
    cost->add_option("--preset", c_preset, "paper-2b | paper-7b");
    cost->add_option("--nodes", c_nodes);
    cost->add_option("--vocab", c_vocab);
    cost->add_option("--hidden", c_hidden);
    cost->add_option("--intermediate", c_inter);
    cost->add_option("--layers", c_layers);
    cost->add_option("--experts", c_experts);
    cost->add_option("--active", c_active);

    // theory-check
    auto* theory = app.add_subcommand("theory-check", "convex-suite convergence diagnostics");
    int t_rounds = 200, t_H = 4, t_N = 4;
    double t_eta = 0.05;
    uint64_t t_seed = 7;
    theory->add_option("--rounds", t_rounds);
    theory->add_option("--H", t_H);
    theory->add_option("--N", t_N);
    theory->add_option("--eta", t_eta);
    theory->add_option("--seed", t_seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            auto corpus = spes::gen_corpus(g_vocab, g_seq, g_sources, g_sequences, g_seed, g_skew);
            std::ofstream f(g_out, std::ios::trunc);
            if (!f) throw std::runtime_error("cannot write " + g_out);
            f << "source";
            for (int64_t p = 0; p <= g_seq; ++p) f << ",t" << p;
            f << "\n";
            for (int64_t r = 0; r < corpus.sequences(); ++r) {
                f << corpus.source_id[static_cast<size_t>(r)];
                for (int64_t p = 0; p <= g_seq; ++p) f << ',' << corpus.at(r, p);
                f << "\n";
            }
            std::cout << "wrote " << corpus.sequences() << " sequences to " << g_out << "\n";
        } else if (*run) {
            spes::ExperimentConfig cfg;
            if (!r_preset.empty()) {
                if (r_preset != "paper-2b-like")
                    throw std::runtime_error("unknown preset: " + r_preset);
                cfg = spes::preset_paper_2b_like();
            } else if (!r_config.empty()) {
                cfg = spes::ExperimentConfig::from_json(read_file(r_config));
            } else {
                throw std::runtime_error("run: need --config or --preset");
            }
            if (!r_paradigm.empty()) cfg.paradigm = spes::paradigm_from_name(r_paradigm);
            if (r_transport == "socket") {
                cfg.socket_transport = true;
                cfg.socket_port = r_port;
            } else if (r_transport != "inproc") {
                throw std::runtime_error("unknown transport: " + r_transport);
            }
            auto res = spes::run_experiment(cfg, metrics_root(r_out));
            std::cout << "run " << cfg.name << " finished; final eval loss "
                      << res.final_eval_loss << "; metrics in " << res.dir << "\n";
        } else if (*abl) {
            spes::ExperimentConfig base;
            if (!a_preset.empty()) {
                if (a_preset != "paper-2b-like")
                    throw std::runtime_error("unknown preset: " + a_preset);
                base = spes::preset_paper_2b_like();
            } else if (!a_config.empty()) {
                base = spes::ExperimentConfig::from_json(read_file(a_config));
            } else {
                throw std::runtime_error("ablate: need --config or --preset");
            }
            std::vector<spes::AblationCell> grid;
            auto add = [&](const std::string& label, spes::ExperimentConfig c) {
                c.name = base.name + "-" + label;
                grid.push_back({label, std::move(c)});
            };
            for (int h : a_H) {
                auto c = base;
                c.local_steps = h;
                add("H" + std::to_string(h), c);
            }
            for (int n : a_N) {
                auto c = base;
                c.nodes = n;
                add("N" + std::to_string(n), c);
            }
            for (double al : a_alpha) {
                auto c = base;
                c.merge.alpha0 = al;
                std::ostringstream os;
                os << "alpha" << al;
                add(os.str(), c);
            }
            for (int k : a_K) {
                auto c = base;
                c.merge.peers = k;
                add("K" + std::to_string(k), c);
            }
            for (int tm : a_Tmerge) {
                auto c = base;
                c.merge.warmup_rounds = tm;
                add("Tmerge" + std::to_string(tm), c);
            }
            if (grid.empty()) add("base", base);
            auto rows = spes::run_ablation(grid, metrics_root(a_out));
            for (const auto& row : rows)
                std::cout << row.label << ": "
                          << (row.ok ? "final loss " + std::to_string(row.final_loss)
                                     : "FAILED: " + row.error)
                          << "\n";
        } else if (*rep) {
            std::cout << spes::emit_report(p_dir);
        } else if (*cost) {
            spes::ShapeSpec spec;
            if (c_preset == "paper-2b") {
                spec = spes::paper_2b_spec(c_nodes > 0 ? c_nodes : 16);
            } else if (c_preset == "paper-7b") {
                spec = spes::paper_7b_spec(c_nodes > 0 ? c_nodes : 4);
            } else if (c_preset.empty()) {
                spec.model.vocab = c_vocab;
                spec.model.hidden = c_hidden;
                spec.model.intermediate = c_inter;
                spec.model.layers = c_layers;
                spec.model.experts_total = c_experts;
                spec.model.experts_active = c_active;
                spec.nodes = c_nodes > 0 ? c_nodes : 1;
            } else {
                throw std::runtime_error("unknown preset: " + c_preset);
            }
            std::cout << spes::cost_report(spec).to_json() << "\n";
        } else if (*theory) {
            auto p = spes::make_logistic(6, 4, t_N, 64, t_seed, false);
            auto run_res = spes::run_toy_spes(p, t_eta, t_H, t_N, t_rounds, 4, t_seed + 1);
            auto probe = spes::estimate_constants(p, p.zero_point(), 200, t_seed + 2);
            spes::Theorem1Inputs in;
            in.eta = t_eta;
            in.H = t_H;
            in.N = t_N;
            in.T = t_rounds;
            in.F0_minus_Finf = p.full_loss(p.zero_point());
            auto bound = spes::theorem1_rhs(probe, in);
            std::cout << "probe: " << probe.to_json() << "\n"
                      << "drift inequality: " << (run_res.drift_ok ? "holds" : "VIOLATED")
                      << " (max ratio " << run_res.max_drift_ratio << ")\n"
                      << "measured avg ||grad F||^2: " << run_res.avg_grad_sq << "\n"
                      << "theorem-1 rhs: " << bound.total
                      << (bound.total >= run_res.avg_grad_sq ? " (>= measured)"
                                                             : " (BELOW measured)")
                      << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
