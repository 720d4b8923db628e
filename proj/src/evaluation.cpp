#include "synergen/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "synergen/rng.hpp"

namespace synergen {

EvalTask eval_task_from_name(const std::string& s) {
    if (s == "retrieval") return EvalTask::retrieval;
    if (s == "ranking") return EvalTask::ranking;
    throw std::invalid_argument("unknown task '" + s + "'");
}

EvalMode eval_mode_from_name(const std::string& s) {
    if (s == "search") return EvalMode::search;
    if (s == "recommendation") return EvalMode::recommendation;
    throw std::invalid_argument("unknown mode '" + s + "'");
}

PoolProtocol protocol_from_name(const std::string& s) {
    if (s == "pool100") return PoolProtocol::pool100;
    if (s == "full") return PoolProtocol::full_catalog;
    if (s == "impressed") return PoolProtocol::impressed;
    throw std::invalid_argument("unknown protocol '" + s + "'");
}

TargetFilter target_filter_from_name(const std::string& s) {
    if (s == "auto") return TargetFilter::auto_mode;
    if (s == "query") return TargetFilter::query;
    if (s == "query_free") return TargetFilter::query_free;
    if (s == "any") return TargetFilter::any;
    throw std::invalid_argument("unknown target filter '" + s + "'");
}

const char* eval_task_name(EvalTask t) { return t == EvalTask::retrieval ? "retrieval" : "ranking"; }
const char* eval_mode_name(EvalMode m) { return m == EvalMode::search ? "search" : "recommendation"; }
const char* protocol_name(PoolProtocol p) {
    switch (p) {
        case PoolProtocol::pool100: return "pool100";
        case PoolProtocol::full_catalog: return "full";
        case PoolProtocol::impressed: return "impressed";
    }
    return "?";
}

double recall_at_k(int rank, int k) {
    if (rank < 1) throw std::invalid_argument("recall_at_k: rank must be >= 1");
    return rank <= k ? 1.0 : 0.0;
}

double ndcg_at_k(int rank, int k) {
    if (rank < 1) throw std::invalid_argument("ndcg_at_k: rank must be >= 1");
    return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

double mrr(int rank) {
    if (rank < 1) throw std::invalid_argument("mrr: rank must be >= 1");
    return 1.0 / static_cast<double>(rank);
}

CandidatePool build_pool100(int target, int catalog_size, std::mt19937_64& rng) {
    if (catalog_size < 100) throw std::invalid_argument("pool100 needs a catalog of at least 100 items");
    if (target < 0 || target >= catalog_size) throw std::invalid_argument("pool100: target outside catalog");
    CandidatePool pool;
    pool.target = target;
    std::set<int> seen = {target};
    while (pool.negatives.size() < 99) {
        const int cand = static_cast<int>(rng() % static_cast<uint64_t>(catalog_size));
        if (seen.insert(cand).second) pool.negatives.push_back(cand);
    }
    return pool;
}

CandidatePool build_full_pool(int target, int catalog_size) {
    if (target < 0 || target >= catalog_size) throw std::invalid_argument("full pool: target outside catalog");
    CandidatePool pool;
    pool.target = target;
    pool.negatives.reserve(catalog_size - 1);
    for (int i = 0; i < catalog_size; ++i)
        if (i != target) pool.negatives.push_back(i);
    return pool;
}

CandidatePool build_impressed_pool(int target, const Session& session, int64_t request_group) {
    CandidatePool pool;
    pool.target = target;
    std::set<int> seen = {target};
    for (const Event& e : session.events)
        if (e.request_group == request_group && e.action == Action::impression && seen.insert(e.item_id).second)
            pool.negatives.push_back(e.item_id);
    return pool;
}

std::vector<int> score_candidates(const Model& model, const std::vector<Token>& context, EvalTask task,
                                  const TargetInfo& target, const CandidatePool& pool) {
    if (pool.target < 0) throw std::invalid_argument("score_candidates: empty pool");
    std::vector<int> items = {pool.target};
    items.insert(items.end(), pool.negatives.begin(), pool.negatives.end());

    Tape tape;
    GraphRun run(model, tape, false);
    std::vector<Token> tokens = context;
    std::vector<double> scores(items.size());

    if (task == EvalTask::retrieval) {
        Token rt;
        rt.kind = TokenKind::retrieval;
        rt.query_id = target.query_id;
        rt.t = target.t;
        rt.req_group = target.req_group;
        rt.event_id = target.event_id;
        tokens.push_back(rt);
        const MaskMatrix mask = build_mask(metas_of(tokens), 0);
        const int hidden = run.forward(tokens, mask);
        const int proj = run.retrieval_projection(hidden);
        const int n = static_cast<int>(tokens.size());
        const int row = tape.slice_rows(proj, n - 1, n);
        const int sims = tape.matmul_nt(row, run.item_embeddings(items));
        const Tensor& v = tape.value(sims);
        for (size_t i = 0; i < items.size(); ++i) scores[i] = v.at(0, static_cast<int>(i));
    } else {
        std::vector<int> rows;
        rows.reserve(items.size());
        for (int item : items) {
            Token kt;
            kt.kind = TokenKind::ranking;
            kt.query_id = target.query_id;
            kt.item_id = item;
            kt.t = target.t;
            kt.req_group = target.req_group;
            kt.event_id = target.event_id;
            rows.push_back(static_cast<int>(tokens.size()));
            tokens.push_back(kt);
        }
        const MaskMatrix mask = build_mask(metas_of(tokens), 0);
        const int hidden = run.forward(tokens, mask);
        const int logits = run.ranking_logits(hidden, rows);
        const Tensor& v = tape.value(logits);
        for (size_t i = 0; i < items.size(); ++i) scores[i] = v.at(static_cast<int>(i), 0);
    }

    std::vector<int> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return items[a] < items[b];
    });
    std::vector<int> ranked;
    ranked.reserve(items.size());
    for (int i : order) ranked.push_back(items[i]);
    return ranked;
}

int rank_of_target(const std::vector<int>& ranked, int target) {
    for (size_t i = 0; i < ranked.size(); ++i)
        if (ranked[i] == target) return static_cast<int>(i) + 1;
    throw std::logic_error("rank_of_target: target not in ranking");
}

void EvalConfig::validate() const {
    if (max_events < 1) throw std::invalid_argument("eval config: max_events must be >= 1");
    if (pool_seeds < 1) throw std::invalid_argument("eval config: pool_seeds must be >= 1");
    if (recall_ks.empty() || ndcg_ks.empty()) throw std::invalid_argument("eval config: empty metric cutoffs");
    if (protocol == PoolProtocol::full_catalog && task == EvalTask::ranking)
        throw std::invalid_argument("full-catalog ranking is not supported; use pool100 or impressed");
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["task"] = task;
    j["mode"] = mode;
    j["protocol"] = protocol;
    j["n_targets"] = n_targets;
    j["n_scored"] = n_scored;
    j["seed"] = seed;
    nlohmann::ordered_json r, n;
    for (const auto& [k, v] : recall) r["recall@" + std::to_string(k)] = v;
    for (const auto& [k, v] : ndcg) n["ndcg@" + std::to_string(k)] = v;
    j["recall"] = r;
    j["ndcg"] = n;
    j["mrr"] = mrr;
    return j;
}

std::string EvalReport::table() const {
    std::ostringstream os;
    os << "task=" << task << " mode=" << mode << " protocol=" << protocol << " targets=" << n_targets
       << " scored=" << n_scored << "\n";
    os << "  metric      value\n";
    char buf[64];
    for (const auto& [k, v] : recall) {
        std::snprintf(buf, sizeof(buf), "  recall@%-4d %.4f\n", k, v);
        os << buf;
    }
    for (const auto& [k, v] : ndcg) {
        std::snprintf(buf, sizeof(buf), "  ndcg@%-6d %.4f\n", k, v);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "  mrr         %.4f\n", mrr);
    os << buf;
    return os.str();
}

EvalReport run_eval(const Model& model, const std::vector<Session>& sessions, const SplitSpec& split,
                    const EvalConfig& cfg) {
    cfg.validate();
    const int catalog = model.config().n_items;

    std::map<std::string, const Session*> by_user;
    for (const Session& s : sessions) by_user[s.user_id] = &s;

    TargetFilter filter = cfg.target_filter;
    if (filter == TargetFilter::auto_mode)
        filter = cfg.mode == EvalMode::search ? TargetFilter::query : TargetFilter::query_free;

    EvalReport rep;
    rep.task = eval_task_name(cfg.task);
    rep.mode = eval_mode_name(cfg.mode);
    rep.protocol = protocol_name(cfg.protocol);
    rep.seed = cfg.seed;
    for (int k : cfg.recall_ks) rep.recall[k] = 0.0;
    for (int k : cfg.ndcg_ks) rep.ndcg[k] = 0.0;

    for (const auto& [user, holdout] : split.by_user) {
        auto it = by_user.find(user);
        if (it == by_user.end()) continue;
        const Session& session = *it->second;
        const Event& test = session.events.at(holdout.test_index);

        const bool has_query = test.query_id.has_value();
        if (filter == TargetFilter::query && !has_query) continue;
        if (filter == TargetFilter::query_free && has_query) continue;

        std::vector<Token> context;
        for (const Event& e : session.events) {
            if (e.request_group >= test.request_group) continue;
            Token t;
            t.kind = TokenKind::context;
            t.item_id = e.item_id;
            t.action = static_cast<int>(e.action);
            t.t = e.t_unix;
            t.req_group = e.request_group;
            t.event_id = e.event_id;
            context.push_back(t);
        }
        if (context.empty()) continue;
        if (static_cast<int>(context.size()) > cfg.max_events)
            context.erase(context.begin(), context.end() - cfg.max_events);

        TargetInfo target;
        target.query_id = cfg.mode == EvalMode::search ? test.query_id : std::nullopt;
        target.t = test.t_unix;
        target.req_group = test.request_group;
        target.event_id = test.event_id;

        std::vector<CandidatePool> pools;
        switch (cfg.protocol) {
            case PoolProtocol::pool100:
                for (int s = 0; s < cfg.pool_seeds; ++s) {
                    auto rng = make_engine(cfg.seed, "eval.pool", static_cast<uint64_t>(s),
                                           static_cast<uint64_t>(test.event_id));
                    pools.push_back(build_pool100(test.item_id, catalog, rng));
                }
                break;
            case PoolProtocol::full_catalog:
                pools.push_back(build_full_pool(test.item_id, catalog));
                break;
            case PoolProtocol::impressed: {
                CandidatePool p = build_impressed_pool(test.item_id, session, test.request_group);
                if (p.negatives.empty()) continue;  // nothing was impressed alongside the target
                pools.push_back(std::move(p));
                break;
            }
        }

        ++rep.n_targets;
        for (const CandidatePool& pool : pools) {
            const std::vector<int> ranked = score_candidates(model, context, cfg.task, target, pool);
            const int rank = rank_of_target(ranked, test.item_id);
            for (int k : cfg.recall_ks) rep.recall[k] += recall_at_k(rank, k);
            for (int k : cfg.ndcg_ks) rep.ndcg[k] += ndcg_at_k(rank, k);
            rep.mrr += mrr(rank);
            ++rep.n_scored;
        }
    }

    if (rep.n_scored == 0) throw std::runtime_error("run_eval: no evaluable targets under this protocol/filter");
    for (auto& [k, v] : rep.recall) v /= rep.n_scored;
    for (auto& [k, v] : rep.ndcg) v /= rep.n_scored;
    rep.mrr /= rep.n_scored;
    return rep;
}

}  // namespace synergen
