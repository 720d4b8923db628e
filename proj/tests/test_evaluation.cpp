#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "doctest.h"
#include "synergen/evaluation.hpp"
#include "synergen/rng.hpp"

using namespace synergen;

namespace {

SynthSpec small_spec() {
    SynthSpec sp;
    sp.users = 12;
    sp.catalog_size = 120;  // enough for pool100
    sp.query_vocab = 8;
    sp.requests_per_user = 8;
    sp.n_clusters = 4;
    sp.d_item_semantic = 8;
    sp.d_query_semantic = 8;
    return sp;
}

ModelConfig small_config() {
    ModelConfig mc;
    mc.layers = 1;
    mc.d_model = 16;
    mc.heads = 2;
    mc.mlp_hidden = 32;
    mc.dims = {8, 4, 8, 4};
    return mc;
}

}  // namespace

TEST_CASE("metric closed forms") {
    CHECK(recall_at_k(1, 1) == 1.0);
    CHECK(recall_at_k(11, 10) == 0.0);
    CHECK(recall_at_k(10, 10) == 1.0);
    CHECK(ndcg_at_k(1, 10) == 1.0);
    CHECK(ndcg_at_k(3, 5) == doctest::Approx(0.5));  // 1/log2(4)
    CHECK(ndcg_at_k(6, 5) == 0.0);
    CHECK(mrr(1) == 1.0);
    CHECK(mrr(4) == 0.25);
    CHECK_THROWS_AS(recall_at_k(0, 5), std::invalid_argument);
    CHECK_THROWS_AS(ndcg_at_k(0, 5), std::invalid_argument);
    CHECK_THROWS_AS(mrr(0), std::invalid_argument);
}

TEST_CASE("metrics agree with naive oracles on random cases") {
    auto rng = make_engine(0, "metric.oracle");
    for (int i = 0; i < 500; ++i) {
        const int rank = 1 + static_cast<int>(rng() % 200);
        const int k = 1 + static_cast<int>(rng() % 50);
        CHECK(recall_at_k(rank, k) == (rank <= k ? 1.0 : 0.0));
        const double n = rank <= k ? 1.0 / (std::log(rank + 1.0) / std::log(2.0)) : 0.0;
        CHECK(ndcg_at_k(rank, k) == doctest::Approx(n).epsilon(1e-14));
        CHECK(mrr(rank) == doctest::Approx(1.0 / rank).epsilon(1e-14));
    }
}

TEST_CASE("pool builders enforce their invariants") {
    auto rng = make_engine(1, "pool");
    const CandidatePool p = build_pool100(7, 150, rng);
    CHECK(p.target == 7);
    CHECK(p.negatives.size() == 99);
    std::set<int> seen(p.negatives.begin(), p.negatives.end());
    CHECK(seen.size() == 99);
    CHECK(seen.count(7) == 0);
    for (int n : seen) {
        CHECK(n >= 0);
        CHECK(n < 150);
    }
    CHECK_THROWS_AS(build_pool100(7, 99, rng), std::invalid_argument);
    CHECK_THROWS_AS(build_pool100(200, 150, rng), std::invalid_argument);

    const CandidatePool f = build_full_pool(3, 10);
    CHECK(f.negatives.size() == 9);
    CHECK(std::count(f.negatives.begin(), f.negatives.end(), 3) == 0);

    Session s;
    s.user_id = "u";
    Event e;
    e.user_id = "u";
    e.request_group = 2;
    e.action = Action::impression;
    e.item_id = 5;
    s.events.push_back(e);
    e.item_id = 9;
    s.events.push_back(e);
    e.item_id = 5;  // duplicate impression
    s.events.push_back(e);
    e.request_group = 3;  // different group excluded
    e.item_id = 4;
    s.events.push_back(e);
    const CandidatePool imp = build_impressed_pool(7, s, 2);
    CHECK(imp.negatives == std::vector<int>{5, 9});
}

TEST_CASE("score_candidates: trivial pool, determinism, joint == per-item") {
    Model model(small_config(), synth_semantic_store(small_spec(), 2));
    std::vector<Token> context;
    for (int i = 0; i < 4; ++i) {
        Token t;
        t.kind = TokenKind::context;
        t.item_id = i;
        t.t = 1000 + i * 100;
        t.req_group = i;
        t.event_id = i;
        context.push_back(t);
    }
    TargetInfo target;
    target.t = 2000;
    target.req_group = 10;
    target.event_id = 99;

    CandidatePool one;
    one.target = 42;
    CHECK(score_candidates(model, context, EvalTask::retrieval, target, one) == std::vector<int>{42});
    CHECK(score_candidates(model, context, EvalTask::ranking, target, one) == std::vector<int>{42});
    CandidatePool empty;
    CHECK_THROWS_AS(score_candidates(model, context, EvalTask::retrieval, target, empty),
                    std::invalid_argument);

    CandidatePool pool;
    pool.target = 3;
    pool.negatives = {11, 55, 97, 14};
    const auto ranked = score_candidates(model, context, EvalTask::retrieval, target, pool);
    CHECK(ranked == score_candidates(model, context, EvalTask::retrieval, target, pool));
    CHECK(ranked.size() == 5);

    // per-item rescoring gives the same order: every singleton's score is
    // reflected by pairwise pools
    for (size_t i = 0; i + 1 < ranked.size(); ++i) {
        CandidatePool duel;
        duel.target = ranked[i];
        duel.negatives = {ranked[i + 1]};
        CHECK(score_candidates(model, context, EvalTask::retrieval, target, duel)[0] == ranked[i]);
    }
}

TEST_CASE("ties break by item id ascending") {
    // zeroed retrieval head scores every item identically
    Model model(small_config(), synth_semantic_store(small_spec(), 2));
    for (auto& x : model.params().get("head.retrieval.w").value.data()) x = 0.0;
    std::vector<Token> context(1);
    context[0].kind = TokenKind::context;
    context[0].item_id = 0;
    TargetInfo target;
    target.req_group = 5;
    CandidatePool pool;
    pool.target = 50;
    pool.negatives = {9, 80, 2};
    CHECK(score_candidates(model, context, EvalTask::retrieval, target, pool) ==
          std::vector<int>{2, 9, 50, 80});
    CHECK(rank_of_target({2, 9, 50, 80}, 50) == 3);
    CHECK_THROWS_AS(rank_of_target({2, 9}, 50), std::logic_error);
}

TEST_CASE("run_eval: filters, determinism, protocol rules") {
    const SynthSpec sp = small_spec();
    const auto sessions = synth_generate(sp, 3);
    const SplitSpec split = leave_one_out_split(sessions);
    Model model(small_config(), synth_semantic_store(sp, 2));

    EvalConfig cfg;
    cfg.task = EvalTask::retrieval;
    cfg.mode = EvalMode::recommendation;
    cfg.protocol = PoolProtocol::pool100;
    cfg.pool_seeds = 2;

    const EvalReport a = run_eval(model, sessions, split, cfg);
    const EvalReport b = run_eval(model, sessions, split, cfg);
    CHECK(a.to_json() == b.to_json());
    CHECK(a.n_scored == a.n_targets * 2);
    for (const auto& [k, v] : a.recall) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(a.mrr >= 0.0);
    CHECK(a.mrr <= 1.0);
    // recall is monotone in k
    CHECK(a.recall.at(1) <= a.recall.at(5));
    CHECK(a.recall.at(5) <= a.recall.at(10));

    // auto filter: recommendation sees only query-free targets
    EvalConfig sc = cfg;
    sc.mode = EvalMode::search;
    const EvalReport s = run_eval(model, sessions, split, sc);
    CHECK(a.n_targets + s.n_targets == static_cast<int>(split.by_user.size()));

    // "any" ignores the query split
    EvalConfig any = cfg;
    any.target_filter = TargetFilter::any;
    CHECK(run_eval(model, sessions, split, any).n_targets == static_cast<int>(split.by_user.size()));

    EvalConfig bad = cfg;
    bad.task = EvalTask::ranking;
    bad.protocol = PoolProtocol::full_catalog;
    CHECK_THROWS_WITH_AS(run_eval(model, sessions, split, bad), doctest::Contains("full-catalog ranking"),
                         std::invalid_argument);

    // impressed ranking works and scores once per target
    EvalConfig imp = cfg;
    imp.task = EvalTask::ranking;
    imp.protocol = PoolProtocol::impressed;
    const EvalReport ir = run_eval(model, sessions, split, imp);
    CHECK(ir.n_scored == ir.n_targets);
}

TEST_CASE("report serialization") {
    EvalReport r;
    r.task = "retrieval";
    r.mode = "search";
    r.protocol = "pool100";
    r.n_targets = 5;
    r.n_scored = 50;
    r.recall[1] = 0.5;
    r.ndcg[10] = 0.25;
    r.mrr = 0.3;
    const nlohmann::json j = r.to_json();
    CHECK(j["recall"]["recall@1"] == 0.5);
    CHECK(j["ndcg"]["ndcg@10"] == 0.25);
    CHECK(j["mrr"] == 0.3);
    const std::string table = r.table();
    CHECK(table.find("recall@1") != std::string::npos);
    CHECK(table.find("0.5000") != std::string::npos);
}

TEST_CASE("name parsing for cli enums") {
    CHECK(eval_task_from_name("ranking") == EvalTask::ranking);
    CHECK(eval_mode_from_name("search") == EvalMode::search);
    CHECK(protocol_from_name("full") == PoolProtocol::full_catalog);
    CHECK(target_filter_from_name("query_free") == TargetFilter::query_free);
    CHECK_THROWS_AS(eval_task_from_name("both"), std::invalid_argument);
    CHECK_THROWS_AS(protocol_from_name("pool1000"), std::invalid_argument);
    CHECK(std::string(protocol_name(PoolProtocol::impressed)) == "impressed");
}
