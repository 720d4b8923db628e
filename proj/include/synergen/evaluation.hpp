#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "synergen/events.hpp"
#include "synergen/model.hpp"

namespace synergen {

enum class EvalTask { retrieval, ranking };
enum class EvalMode { search, recommendation };
enum class PoolProtocol { pool100, full_catalog, impressed };
// Which held-out targets qualify; auto_mode derives it from EvalMode
// (search => query targets, recommendation => query-free targets).
enum class TargetFilter { auto_mode, query, query_free, any };

EvalTask eval_task_from_name(const std::string& s);
EvalMode eval_mode_from_name(const std::string& s);
PoolProtocol protocol_from_name(const std::string& s);
TargetFilter target_filter_from_name(const std::string& s);
const char* eval_task_name(EvalTask t);
const char* eval_mode_name(EvalMode m);
const char* protocol_name(PoolProtocol p);

// Rank is 1-based; a single relevant item means IDCG = 1.
double recall_at_k(int rank, int k);
double ndcg_at_k(int rank, int k);
double mrr(int rank);

struct CandidatePool {
    int target = -1;
    std::vector<int> negatives;  // distinct, never containing the target
};

CandidatePool build_pool100(int target, int catalog_size, std::mt19937_64& rng);
CandidatePool build_full_pool(int target, int catalog_size);
// Negatives = items impressed in the target's request group.
CandidatePool build_impressed_pool(int target, const Session& session, int64_t request_group);

// Carries the held-out event's metadata into the appended task token(s).
struct TargetInfo {
    std::optional<int> query_id;
    int64_t t = 0;
    int64_t req_group = 0;
    int64_t event_id = 0;
};

// Scores every pool item with the requested head and returns them ranked
// best-first; ties broken by item id ascending.
std::vector<int> score_candidates(const Model& model, const std::vector<Token>& context, EvalTask task,
                                  const TargetInfo& target, const CandidatePool& pool);
int rank_of_target(const std::vector<int>& ranked, int target);

struct EvalConfig {
    EvalTask task = EvalTask::retrieval;
    EvalMode mode = EvalMode::recommendation;
    PoolProtocol protocol = PoolProtocol::pool100;
    TargetFilter target_filter = TargetFilter::auto_mode;
    int max_events = 64;
    uint64_t seed = 0;
    int pool_seeds = 10;  // pool100 only
    std::vector<int> recall_ks = {1, 5, 10};
    std::vector<int> ndcg_ks = {5, 10};

    void validate() const;
};

struct EvalReport {
    std::string task, mode, protocol;
    int n_targets = 0;
    int n_scored = 0;  // target/seed pairs
    uint64_t seed = 0;
    std::map<int, double> recall;
    std::map<int, double> ndcg;
    double mrr = 0.0;

    nlohmann::json to_json() const;
    std::string table() const;
};

EvalReport run_eval(const Model& model, const std::vector<Session>& sessions, const SplitSpec& split,
                    const EvalConfig& cfg);

}  // namespace synergen
