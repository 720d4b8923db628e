// Command-line front end: synth / train / eval / inspect-mask / gradcheck.
// Exit codes: 0 success, 1 verification failure, 2 usage or config error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "synergen/evaluation.hpp"
#include "synergen/events.hpp"
#include "synergen/gradcheck.hpp"
#include "synergen/model.hpp"
#include "synergen/rng.hpp"
#include "synergen/trainer.hpp"

namespace fs = std::filesystem;
using namespace synergen;

namespace {

int worker_threads() {
    const char* env = std::getenv("SYNERGEN_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    if (n < 1) throw std::runtime_error("SYNERGEN_THREADS must be a positive integer");
    return n;
}

struct RunConfig {
    std::string events = "data/events.jsonl";
    std::string item_semantic = "data/item_semantic.sgem";
    std::string query_semantic = "data/query_semantic.sgem";
    std::string out_dir = "out";
    ModelConfig model;
    TrainConfig train;
};

RunConfig run_config_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    nlohmann::json j = nlohmann::json::parse(in);
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k != "data" && k != "out_dir" && k != "model" && k != "train")
            throw std::runtime_error("run config: unknown key '" + k + "'");
    }
    RunConfig c;
    if (j.contains("data")) {
        const auto& d = j["data"];
        for (auto it = d.begin(); it != d.end(); ++it) {
            const std::string& k = it.key();
            if (k != "events" && k != "item_semantic" && k != "query_semantic")
                throw std::runtime_error("run config: unknown data key '" + k + "'");
        }
        if (d.contains("events")) c.events = d["events"];
        if (d.contains("item_semantic")) c.item_semantic = d["item_semantic"];
        if (d.contains("query_semantic")) c.query_semantic = d["query_semantic"];
    }
    if (j.contains("out_dir")) c.out_dir = j["out_dir"];
    if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
    if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
    return c;
}

nlohmann::json canonical_run_config(const RunConfig& c, const ModelConfig& effective_model) {
    nlohmann::json j;
    j["data"] = {{"events", c.events}, {"item_semantic", c.item_semantic}, {"query_semantic", c.query_semantic}};
    j["out_dir"] = c.out_dir;
    j["model"] = effective_model.to_json();
    j["train"] = c.train.to_json();
    return j;
}

int cmd_synth(const std::string& spec_path, uint64_t seed, const std::string& out) {
    SynthSpec spec;
    if (!spec_path.empty()) spec = synth_spec_from_json_file(spec_path);
    spec.validate();
    fs::create_directories(out);
    const auto sessions = synth_generate(spec, seed);
    write_events(out + "/events.jsonl", sessions);
    const SemanticStore store = synth_semantic_store(spec, seed);
    save_semantic_table(out + "/item_semantic.sgem", store.item_semantic);
    save_semantic_table(out + "/query_semantic.sgem", store.query_semantic);
    std::cout << "wrote " << sessions.size() << " sessions, " << store.item_semantic.rows() << " items, "
              << store.query_semantic.rows() << " queries to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume) {
    const RunConfig cfg = run_config_from_file(config_path);
    auto sessions = load_events(cfg.events);
    const SplitSpec split = leave_one_out_split(sessions);
    SemanticStore store = load_semantic(cfg.item_semantic, cfg.query_semantic, cfg.model.dims);

    Model model(cfg.model, std::move(store));
    const nlohmann::json run_json = canonical_run_config(cfg, model.config());
    Trainer trainer(model, std::move(sessions), split, cfg.train, run_json);

    fs::create_directories(cfg.out_dir);
    std::ios_base::openmode mode = std::ios::trunc;
    if (!resume.empty()) {
        const Checkpoint ckpt = load_checkpoint(resume);
        if (ckpt.run_config != run_json)
            throw std::runtime_error("checkpoint config does not match " + config_path);
        restore_params(model, ckpt);
        trainer.set_step(ckpt.step);
        mode = std::ios::app;
    }
    std::ofstream metrics(cfg.out_dir + "/metrics.jsonl", mode);
    if (!metrics) throw std::runtime_error("cannot write metrics log in " + cfg.out_dir);

    try {
        while (trainer.step() < cfg.train.steps) {
            int64_t chunk = cfg.train.steps - trainer.step();
            if (cfg.train.checkpoint_every > 0) chunk = std::min<int64_t>(chunk, cfg.train.checkpoint_every);
            trainer.run(static_cast<int>(chunk), &metrics);
            metrics.flush();
            if (cfg.train.checkpoint_every > 0 && trainer.step() < cfg.train.steps)
                trainer.save(cfg.out_dir + "/ckpt_" + std::to_string(trainer.step()) + ".sgck");
        }
    } catch (const std::runtime_error& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return 1;
    }
    trainer.save(cfg.out_dir + "/final.sgck");
    std::cout << "trained " << trainer.step() << " steps; checkpoint at " << cfg.out_dir << "/final.sgck\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& events_path, const std::string& item_path,
             const std::string& query_path, const std::string& task, const std::string& mode,
             const std::string& protocol, const std::string& filter, uint64_t seed, int max_events,
             int pool_seeds, const std::string& out_json) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (!ckpt.run_config.contains("model")) throw std::runtime_error("checkpoint lacks a model config");
    const ModelConfig mc = ModelConfig::from_json(ckpt.run_config["model"]);
    SemanticStore store = load_semantic(item_path, query_path, mc.dims);
    Model model(mc, std::move(store));
    restore_params(model, ckpt);

    const auto sessions = load_events(events_path);
    const SplitSpec split = leave_one_out_split(sessions);

    EvalConfig ec;
    ec.task = eval_task_from_name(task);
    ec.mode = eval_mode_from_name(mode);
    ec.protocol = protocol_from_name(protocol);
    ec.target_filter = target_filter_from_name(filter);
    ec.seed = seed;
    ec.max_events = max_events;
    ec.pool_seeds = pool_seeds;

    const EvalReport rep = run_eval(model, sessions, split, ec);
    std::cout << rep.table();
    if (!out_json.empty()) {
        std::ofstream out(out_json);
        if (!out) throw std::runtime_error("cannot write " + out_json);
        out << rep.to_json().dump(2) << "\n";
    }
    return 0;
}

int cmd_inspect_mask(const std::string& events_path, const std::string& user, int64_t theta) {
    const auto sessions = load_events(events_path);
    const Session* session = nullptr;
    for (const auto& s : sessions)
        if (s.user_id == user) session = &s;
    if (!session) throw std::runtime_error("unknown user '" + user + "'");

    std::vector<TokenMeta> metas;
    for (const Event& e : session->events)
        metas.push_back({TokenKind::context, e.t_unix, e.request_group, e.event_id});
    const MaskMatrix mask = build_mask(metas, theta);

    const int n = static_cast<int>(metas.size());
    for (int i = 0; i < n; ++i)
        std::cout << i << "\tcontext\tt=" << metas[i].t << "\treq_group=" << metas[i].req_group
                  << "\tevent_id=" << metas[i].event_id << "\n";
    std::cout << "theta=" << theta << " rows attend to columns ('#' = allowed):\n";
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) std::cout << (mask.at(i, j) ? '#' : '.');
        std::cout << "\n";
    }
    return 0;
}

int cmd_gradcheck(uint64_t seed) {
    SynthSpec sp;
    sp.users = 6;
    sp.catalog_size = 40;
    sp.query_vocab = 8;
    sp.requests_per_user = 10;
    sp.n_clusters = 4;
    sp.d_item_semantic = 16;
    sp.d_query_semantic = 16;
    const auto sessions = synth_generate(sp, seed);
    const SplitSpec split = leave_one_out_split(sessions);

    ModelConfig mc;
    mc.layers = 2;
    mc.d_model = 32;
    mc.heads = 4;
    mc.mlp_hidden = 64;
    mc.dims = {16, 8, 16, 4};
    mc.seed = seed;
    Model model(mc, synth_semantic_store(sp, seed));

    TrainConfig tc;
    tc.p_insert = 1.0;
    tc.p_query_mask = 0.3;
    tc.k_hard = 4;
    tc.max_events = 24;
    std::vector<AssembledSequence> batch;
    for (int i = 0; i < 3; ++i) {
        auto rng = make_engine(seed, "gradcheck.assemble", static_cast<uint64_t>(i));
        batch.push_back(insert_task_tokens(sessions[i], split, rng, tc));
    }
    auto neg_rng = make_engine(seed, "gradcheck.easy");
    sample_negatives(batch, neg_rng, tc, sp.catalog_size);

    const LossWeights w;
    const auto res = gradcheck(
        model, [&](GraphRun& run, Tape& tape) { return build_batch_loss(run, tape, batch, w); }, 6, 1e-5, seed);
    std::cout << "checked " << res.coords_checked << " coordinates, max relative error " << res.max_rel_err
              << " (worst: " << res.worst_param << ")\n";
    if (res.max_rel_err >= 1e-4) {
        std::cerr << "gradient check failed: " << res.max_rel_err << " >= 1e-4\n";
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unified search/recommendation sequence model"};
    app.require_subcommand(1);

    std::string spec_path, out = "data";
    uint64_t seed = 0;
    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    synth->add_option("--spec", spec_path, "generator spec JSON (defaults when omitted)");
    synth->add_option("--seed", seed, "master seed");
    synth->add_option("--out", out, "output directory");

    std::string config_path, resume;
    auto* train = app.add_subcommand("train", "train from a run config");
    train->add_option("--config", config_path, "run config JSON")->required();
    train->add_option("--resume", resume, "checkpoint to resume from");

    std::string ckpt, ev_events = "data/events.jsonl", ev_item = "data/item_semantic.sgem",
                      ev_query = "data/query_semantic.sgem", task = "retrieval", mode = "recommendation",
                      protocol = "pool100", filter = "auto", out_json;
    uint64_t ev_seed = 0;
    int max_events = 64, pool_seeds = 10;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", ckpt, "checkpoint path")->required();
    eval->add_option("--events", ev_events, "events JSONL");
    eval->add_option("--item-semantic", ev_item, "item semantic table");
    eval->add_option("--query-semantic", ev_query, "query semantic table");
    eval->add_option("--task", task, "retrieval|ranking");
    eval->add_option("--mode", mode, "search|recommendation");
    eval->add_option("--protocol", protocol, "pool100|full|impressed");
    eval->add_option("--target-filter", filter, "auto|query|query_free|any");
    eval->add_option("--seed", ev_seed, "eval seed");
    eval->add_option("--max-events", max_events, "context length cap");
    eval->add_option("--pool-seeds", pool_seeds, "pool100 resampling seeds");
    eval->add_option("--out", out_json, "write report JSON here");

    std::string im_events, im_user;
    int64_t theta = 0;
    auto* inspect = app.add_subcommand("inspect-mask", "print a session's attention mask");
    inspect->add_option("--events", im_events, "events JSONL")->required();
    inspect->add_option("--session", im_user, "user id")->required();
    inspect->add_option("--theta", theta, "recency threshold in seconds");

    uint64_t gc_seed = 0;
    auto* gc = app.add_subcommand("gradcheck", "backprop vs finite differences");
    gc->add_option("--seed", gc_seed, "seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return 2;
    }

    try {
        (void)worker_threads();  // validated; all work is single-threaded for reproducibility
        if (synth->parsed()) return cmd_synth(spec_path, seed, out);
        if (train->parsed()) return cmd_train(config_path, resume);
        if (eval->parsed())
            return cmd_eval(ckpt, ev_events, ev_item, ev_query, task, mode, protocol, filter, ev_seed, max_events,
                            pool_seeds, out_json);
        if (inspect->parsed()) return cmd_inspect_mask(im_events, im_user, theta);
        if (gc->parsed()) return cmd_gradcheck(gc_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
