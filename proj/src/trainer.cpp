#include "synergen/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <set>
#include <stdexcept>

#include "synergen/rng.hpp"

namespace synergen {

void TrainConfig::validate() const {
    if (batch_size < 1 || max_events < 1 || steps < 0) throw std::invalid_argument("train config: bad sizes");
    if (p_insert < 0.0 || p_insert > 1.0 || p_query_mask < 0.0 || p_query_mask > 1.0)
        throw std::invalid_argument("train config: probabilities must be in [0, 1]");
    if (k_hard < 0 || n_easy < 0) throw std::invalid_argument("train config: negative counts must be >= 0");
    if (lr_dense <= 0.0 || lr_sparse <= 0.0) throw std::invalid_argument("train config: learning rates must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || adam_eps <= 0.0)
        throw std::invalid_argument("train config: bad AdamW settings");
    if (theta_choices.empty()) throw std::invalid_argument("train config: theta_choices empty");
    for (int64_t t : theta_choices)
        if (t < 0) throw std::invalid_argument("train config: theta must be >= 0");
    loss.validate();
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j;
    j["batch_size"] = batch_size;
    j["max_events"] = max_events;
    j["p_insert"] = p_insert;
    j["p_query_mask"] = p_query_mask;
    j["k_hard"] = k_hard;
    j["n_easy"] = n_easy;
    j["alpha"] = loss.alpha;
    j["tau"] = loss.tau;
    j["lambda"] = loss.lambda;
    j["lr_dense"] = lr_dense;
    j["lr_sparse"] = lr_sparse;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["adam_eps"] = adam_eps;
    j["weight_decay_dense"] = weight_decay_dense;
    j["weight_decay_sparse"] = weight_decay_sparse;
    j["clip_norm"] = clip_norm;
    j["steps"] = steps;
    j["seed"] = seed;
    j["theta_choices"] = theta_choices;
    j["checkpoint_every"] = checkpoint_every;
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {
        "batch_size", "max_events", "p_insert", "p_query_mask", "k_hard", "n_easy", "alpha", "tau",
        "lambda", "lr_dense", "lr_sparse", "beta1", "beta2", "adam_eps", "weight_decay_dense",
        "weight_decay_sparse", "clip_norm", "steps", "seed", "theta_choices", "checkpoint_every"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw std::runtime_error("train config: unknown key '" + it.key() + "'");
    TrainConfig c;
    if (j.contains("batch_size")) c.batch_size = j["batch_size"];
    if (j.contains("max_events")) c.max_events = j["max_events"];
    if (j.contains("p_insert")) c.p_insert = j["p_insert"];
    if (j.contains("p_query_mask")) c.p_query_mask = j["p_query_mask"];
    if (j.contains("k_hard")) c.k_hard = j["k_hard"];
    if (j.contains("n_easy")) c.n_easy = j["n_easy"];
    if (j.contains("alpha")) c.loss.alpha = j["alpha"];
    if (j.contains("tau")) c.loss.tau = j["tau"];
    if (j.contains("lambda")) c.loss.lambda = j["lambda"];
    if (j.contains("lr_dense")) c.lr_dense = j["lr_dense"];
    if (j.contains("lr_sparse")) c.lr_sparse = j["lr_sparse"];
    if (j.contains("beta1")) c.beta1 = j["beta1"];
    if (j.contains("beta2")) c.beta2 = j["beta2"];
    if (j.contains("adam_eps")) c.adam_eps = j["adam_eps"];
    if (j.contains("weight_decay_dense")) c.weight_decay_dense = j["weight_decay_dense"];
    if (j.contains("weight_decay_sparse")) c.weight_decay_sparse = j["weight_decay_sparse"];
    if (j.contains("clip_norm")) c.clip_norm = j["clip_norm"];
    if (j.contains("steps")) c.steps = j["steps"];
    if (j.contains("seed")) c.seed = j["seed"];
    if (j.contains("theta_choices")) c.theta_choices = j["theta_choices"].get<std::vector<int64_t>>();
    if (j.contains("checkpoint_every")) c.checkpoint_every = j["checkpoint_every"];
    c.validate();
    return c;
}

AssembledSequence insert_task_tokens(const Session& session, const SplitSpec& split, std::mt19937_64& rng,
                                     const TrainConfig& cfg) {
    AssembledSequence out;

    // Events of held-out request groups never enter training sequences.
    std::set<int64_t> held_groups;
    auto it = split.by_user.find(session.user_id);
    if (it != split.by_user.end()) {
        held_groups.insert(session.events[it->second.valid_index].request_group);
        held_groups.insert(session.events[it->second.test_index].request_group);
    }
    std::vector<const Event*> events;
    for (const Event& e : session.events)
        if (!held_groups.count(e.request_group)) events.push_back(&e);
    if (static_cast<int>(events.size()) > cfg.max_events)
        events.erase(events.begin(), events.end() - cfg.max_events);

    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // Pass 1: context tokens.
    std::map<int64_t, std::vector<const Event*>> impressions_by_group;
    for (const Event* e : events) {
        Token t;
        t.kind = TokenKind::context;
        t.item_id = e->item_id;
        t.action = static_cast<int>(e->action);
        t.t = e->t_unix;
        t.req_group = e->request_group;
        t.event_id = e->event_id;
        out.tokens.push_back(t);
        if (e->action == Action::impression) impressions_by_group[e->request_group].push_back(e);
    }

    // Pass 2: task tokens for eligible clicked/purchased events. Positives in
    // the window's first request group get no token: their retrieval token
    // could attend nothing but itself, so the target is pure noise.
    const int64_t first_group = events.empty() ? 0 : events.front()->request_group;
    for (const Event* e : events) {
        if (!e->positive()) continue;
        if (e->request_group <= first_group) continue;
        if (unit(rng) >= cfg.p_insert) continue;
        const bool drop_query = unit(rng) < cfg.p_query_mask;
        std::optional<int> query = drop_query ? std::nullopt : e->query_id;

        std::vector<int> hard;
        auto imp = impressions_by_group.find(e->request_group);
        if (imp != impressions_by_group.end()) {
            std::vector<const Event*> sibs = imp->second;
            if (static_cast<int>(sibs.size()) > cfg.k_hard) {
                std::vector<int> idx(sibs.size());
                for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
                for (int i = 0; i < cfg.k_hard; ++i) {
                    int j = i + static_cast<int>(rng() % (idx.size() - i));
                    std::swap(idx[i], idx[j]);
                    hard.push_back(sibs[idx[i]]->item_id);
                }
            } else {
                for (const Event* s : sibs) hard.push_back(s->item_id);
            }
        }

        AssembledSequence::RetrievalSlot slot;
        slot.positive_item = e->item_id;
        slot.hard_negatives = hard;
        slot.token_row = static_cast<int>(out.tokens.size());
        Token rt;
        rt.kind = TokenKind::retrieval;
        rt.query_id = query;
        rt.action = static_cast<int>(e->action);
        rt.t = e->t_unix;
        rt.req_group = e->request_group;
        rt.event_id = e->event_id;
        out.tokens.push_back(rt);
        out.retrievals.push_back(std::move(slot));

        const int pos_idx = static_cast<int>(out.rank_rows.size());
        auto push_rank = [&](int item, double label) {
            Token kt;
            kt.kind = TokenKind::ranking;
            kt.query_id = query;
            kt.item_id = item;
            kt.action = static_cast<int>(e->action);
            kt.t = e->t_unix;
            kt.req_group = e->request_group;
            kt.event_id = e->event_id;
            out.rank_rows.push_back(static_cast<int>(out.tokens.size()));
            out.rank_labels.push_back(label);
            out.tokens.push_back(kt);
        };
        push_rank(e->item_id, 1.0);
        for (int item : hard) {
            out.rank_pairs.emplace_back(pos_idx, static_cast<int>(out.rank_rows.size()));
            push_rank(item, 0.0);
        }
    }
    return out;
}

void sample_negatives(std::vector<AssembledSequence>& batch, std::mt19937_64& rng, const TrainConfig& cfg,
                      int catalog_size) {
    std::vector<int> batch_positives;
    for (const AssembledSequence& s : batch)
        for (const auto& slot : s.retrievals) batch_positives.push_back(slot.positive_item);

    for (AssembledSequence& s : batch) {
        for (auto& slot : s.retrievals) {
            std::set<int> easy;
            for (int p : batch_positives)
                if (p != slot.positive_item) easy.insert(p);
            std::vector<int> picked(easy.begin(), easy.end());
            if (cfg.n_easy > 0 && static_cast<int>(picked.size()) > cfg.n_easy) {
                for (int i = 0; i < cfg.n_easy; ++i) {
                    int j = i + static_cast<int>(rng() % (picked.size() - i));
                    std::swap(picked[i], picked[j]);
                }
                picked.resize(cfg.n_easy);
                std::sort(picked.begin(), picked.end());
            }
            while (picked.empty()) {
                // degenerate batch with a single distinct positive
                int cand = static_cast<int>(rng() % catalog_size);
                if (cand != slot.positive_item) picked.push_back(cand);
            }
            slot.easy_negatives = std::move(picked);
        }
    }
}

void adamw_step(ParamStore& params, const std::map<int, Tensor>& grads,
                const std::map<int, std::vector<int>>& sparse_touched, const TrainConfig& cfg, int64_t step) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (const auto& [idx, g] : grads) {
        Param& p = params.at(idx);
        if (!g.all_finite()) throw std::runtime_error("NaN gradient for parameter " + p.name);
        const double lr = p.sparse ? cfg.lr_sparse : cfg.lr_dense;
        const double wd = p.sparse ? cfg.weight_decay_sparse : cfg.weight_decay_dense;
        auto update_row = [&](int r) {
            double* val = p.value.row_ptr(r);
            double* m = p.m.row_ptr(r);
            double* v = p.v.row_ptr(r);
            const double* gr = g.row_ptr(r);
            for (int c = 0; c < p.value.cols(); ++c) {
                m[c] = cfg.beta1 * m[c] + (1.0 - cfg.beta1) * gr[c];
                v[c] = cfg.beta2 * v[c] + (1.0 - cfg.beta2) * gr[c] * gr[c];
                const double mhat = m[c] / bc1;
                const double vhat = v[c] / bc2;
                val[c] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + wd * val[c]);
            }
        };
        if (p.sparse) {
            auto it = sparse_touched.find(idx);
            if (it == sparse_touched.end()) continue;
            for (int r : it->second) update_row(r);
        } else {
            for (int r = 0; r < p.value.rows(); ++r) update_row(r);
        }
    }
}

int build_batch_loss(GraphRun& run, Tape& tape, const std::vector<AssembledSequence>& batch,
                     const LossWeights& w, StepStats* stats) {
    w.validate();
    std::vector<RetrievalTerms> terms;
    int easy_sum = -1, hard_sum = -1, point_sum = -1, pair_sum = -1;
    int n_hard_tokens = 0, n_rank = 0, n_pairs = 0;

    for (const AssembledSequence& seq : batch) {
        if (seq.retrievals.empty() && seq.rank_rows.empty()) continue;
        const MaskMatrix mask = build_mask(metas_of(seq.tokens), seq.theta);
        const int hidden = run.forward(seq.tokens, mask);
        if (!seq.retrievals.empty()) {
            const int proj = run.retrieval_projection(hidden);
            for (const auto& slot : seq.retrievals) {
                const int h_row = tape.slice_rows(proj, slot.token_row, slot.token_row + 1);
                std::vector<int> easy_ids = {slot.positive_item};
                easy_ids.insert(easy_ids.end(), slot.easy_negatives.begin(), slot.easy_negatives.end());
                RetrievalTerms t;
                t.easy = infonce(tape, tape.matmul_nt(h_row, run.item_embeddings(easy_ids)), w.tau);
                easy_sum = easy_sum < 0 ? t.easy : tape.add(easy_sum, t.easy);
                if (!slot.hard_negatives.empty()) {
                    std::vector<int> hard_ids = {slot.positive_item};
                    hard_ids.insert(hard_ids.end(), slot.hard_negatives.begin(), slot.hard_negatives.end());
                    t.hard = infonce(tape, tape.matmul_nt(h_row, run.item_embeddings(hard_ids)), w.tau);
                    hard_sum = hard_sum < 0 ? t.hard : tape.add(hard_sum, t.hard);
                    ++n_hard_tokens;
                }
                terms.push_back(t);
            }
        }
        if (!seq.rank_rows.empty()) {
            const int logits = run.ranking_logits(hidden, seq.rank_rows);
            const int point = pointwise_bce(tape, logits, seq.rank_labels);
            point_sum = point_sum < 0 ? point : tape.add(point_sum, point);
            n_rank += static_cast<int>(seq.rank_rows.size());
            if (!seq.rank_pairs.empty()) {
                const int pair = pairwise_loss(tape, logits, seq.rank_pairs);
                pair_sum = pair_sum < 0 ? pair : tape.add(pair_sum, pair);
                n_pairs += static_cast<int>(seq.rank_pairs.size());
            }
        }
    }

    StepStats local;
    local.n_retrieval = static_cast<int>(terms.size());
    local.n_rank = n_rank;
    local.n_pairs = n_pairs;

    // The optimizer consumes per-token means so the step size does not scale
    // with batch assembly density.
    int opt = -1;
    auto add_term = [&](int node, double weight) {
        if (node < 0 || weight == 0.0) return;
        const int scaled = tape.scale(node, weight);
        opt = opt < 0 ? scaled : tape.add(opt, scaled);
    };
    if (easy_sum >= 0) {
        add_term(easy_sum, w.alpha / static_cast<double>(terms.size()));
        local.loss_rel_easy = tape.value(easy_sum).at(0, 0) / static_cast<double>(terms.size());
    }
    if (hard_sum >= 0) {
        add_term(hard_sum, (1.0 - w.alpha) / static_cast<double>(n_hard_tokens));
        local.loss_rel_hard = tape.value(hard_sum).at(0, 0) / static_cast<double>(n_hard_tokens);
    }
    if (point_sum >= 0) {
        add_term(point_sum, 1.0 / static_cast<double>(n_rank));
        local.loss_point = tape.value(point_sum).at(0, 0) / static_cast<double>(n_rank);
    }
    if (pair_sum >= 0) {
        add_term(pair_sum, w.lambda / static_cast<double>(n_pairs));
        local.loss_pair = tape.value(pair_sum).at(0, 0) / static_cast<double>(n_pairs);
    }
    if (opt >= 0) local.loss_total = tape.value(opt).at(0, 0);
    if (stats) *stats = local;
    return opt;
}

Trainer::Trainer(Model& model, std::vector<Session> sessions, SplitSpec split, TrainConfig cfg,
                 nlohmann::json run_config)
    : model_(model),
      sessions_(std::move(sessions)),
      split_(std::move(split)),
      cfg_(std::move(cfg)),
      run_config_(std::move(run_config)) {
    cfg_.validate();
    if (sessions_.empty()) throw std::invalid_argument("Trainer: no sessions");
}

StepStats Trainer::step_once() {
    const int64_t step = step_;
    const int n = static_cast<int>(sessions_.size());
    const int k = std::min(cfg_.batch_size, n);

    auto batch_rng = make_engine(cfg_.seed, "batch", static_cast<uint64_t>(step));
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = 0; i < k; ++i) {
        int j = i + static_cast<int>(batch_rng() % static_cast<uint64_t>(n - i));
        std::swap(idx[i], idx[j]);
    }

    std::vector<AssembledSequence> batch;
    batch.reserve(k);
    for (int i = 0; i < k; ++i) {
        const Session& s = sessions_[idx[i]];
        auto rng = make_engine(cfg_.seed, "assemble", static_cast<uint64_t>(step), hash_str(s.user_id));
        AssembledSequence seq = insert_task_tokens(s, split_, rng, cfg_);
        auto theta_rng = make_engine(cfg_.seed, "theta", static_cast<uint64_t>(step), hash_str(s.user_id));
        seq.theta = cfg_.theta_choices[theta_rng() % cfg_.theta_choices.size()];
        batch.push_back(std::move(seq));
    }
    auto neg_rng = make_engine(cfg_.seed, "easy", static_cast<uint64_t>(step));
    sample_negatives(batch, neg_rng, cfg_, model_.config().n_items);

    Tape tape;
    GraphRun run(model_, tape, true);
    StepStats stats;
    const int opt = build_batch_loss(run, tape, batch, cfg_.loss, &stats);
    if (opt < 0) {
        // batch produced no supervision; count the step and move on
        step_ = step + 1;
        last_ = stats;
        return stats;
    }
    if (!std::isfinite(stats.loss_total)) throw std::runtime_error("non-finite loss at step " + std::to_string(step));

    tape.backward(opt);

    std::map<int, Tensor> grads;
    std::map<int, std::vector<int>> touched;
    double norm_sq = 0.0;
    for (const auto& [name, node] : run.param_nodes()) {
        if (!tape.has_grad(node)) continue;
        const int idx_p = model_.params().index_of(name);
        grads[idx_p] = tape.grad(node);
        if (model_.params().at(idx_p).sparse) touched[idx_p] = tape.touched_rows(node);
        for (double g : grads[idx_p].data()) norm_sq += g * g;
    }
    if (cfg_.clip_norm > 0.0) {
        const double norm = std::sqrt(norm_sq);
        if (norm > cfg_.clip_norm) {
            const double s = cfg_.clip_norm / norm;
            for (auto& [_, g] : grads)
                for (double& x : g.data()) x *= s;
        }
    }
    adamw_step(model_.params(), grads, touched, cfg_, step + 1);

    step_ = step + 1;
    last_ = stats;
    return stats;
}

void Trainer::run(int steps, std::ostream* metrics) {
    using clock = std::chrono::steady_clock;
    for (int i = 0; i < steps; ++i) {
        const auto t0 = clock::now();
        StepStats s = step_once();
        const auto wall_ms =
            std::chrono::duration_cast<std::chrono::milliseconds>(clock::now() - t0).count();
        if (metrics) {
            nlohmann::ordered_json j;
            j["step"] = step_ - 1;
            j["loss_total"] = s.loss_total;
            j["loss_rel_easy"] = s.loss_rel_easy;
            j["loss_rel_hard"] = s.loss_rel_hard;
            j["loss_point"] = s.loss_point;
            j["loss_pair"] = s.loss_pair;
            j["lr_dense"] = cfg_.lr_dense;
            j["lr_sparse"] = cfg_.lr_sparse;
            j["wall_ms"] = wall_ms;
            (*metrics) << j.dump() << "\n";
        }
    }
}

void Trainer::save(const std::string& path) const {
    save_checkpoint(path, run_config_, model_, step_, "stateless-seed:" + std::to_string(cfg_.seed));
}

}  // namespace synergen
