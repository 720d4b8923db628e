#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "synergen/events.hpp"
#include "synergen/losses.hpp"
#include "synergen/model.hpp"

namespace synergen {

struct TrainConfig {
    int batch_size = 8;
    int max_events = 64;  // most recent events kept per training sequence
    double p_insert = 0.5;
    double p_query_mask = 0.3;
    int k_hard = 6;  // impressed negatives per positive
    int n_easy = 0;  // cap on in-batch negatives per token, 0 => all
    LossWeights loss;
    double lr_dense = 0.001;
    double lr_sparse = 0.003;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay_dense = 0.01;
    double weight_decay_sparse = 0.0;
    double clip_norm = 1.0;
    int steps = 500;
    uint64_t seed = 0;
    std::vector<int64_t> theta_choices = {0};
    int checkpoint_every = 0;  // 0 => only on demand

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

// One assembled training sequence: tokens plus index maps into them for the
// retrieval and ranking objectives.
struct AssembledSequence {
    std::vector<Token> tokens;
    int64_t theta = 0;
    struct RetrievalSlot {
        int token_row = -1;
        int positive_item = -1;
        std::vector<int> hard_negatives;  // impressed-but-not-clicked items
        std::vector<int> easy_negatives;  // filled by sample_negatives
    };
    std::vector<RetrievalSlot> retrievals;
    std::vector<int> rank_rows;
    std::vector<double> rank_labels;
    std::vector<std::pair<int, int>> rank_pairs;  // indices into rank_rows order
};

// Emits context tokens for every train-split event and, per eligible clicked
// event, a retrieval token plus a ranking group with probability p_insert.
AssembledSequence insert_task_tokens(const Session& session, const SplitSpec& split, std::mt19937_64& rng,
                                     const TrainConfig& cfg);

// Fills easy negatives from the other positives in the batch.
void sample_negatives(std::vector<AssembledSequence>& batch, std::mt19937_64& rng, const TrainConfig& cfg,
                      int catalog_size);

struct StepStats {
    double loss_total = 0.0;
    double loss_rel_easy = 0.0;
    double loss_rel_hard = 0.0;
    double loss_point = 0.0;
    double loss_pair = 0.0;
    int n_retrieval = 0;
    int n_rank = 0;
    int n_pairs = 0;
};

// Builds the optimizer objective over an assembled batch and returns the
// scalar node, or -1 when the batch carries no supervision. Each component is
// averaged over its own token count before weighting. Fills stats when given.
int build_batch_loss(GraphRun& run, Tape& tape, const std::vector<AssembledSequence>& batch,
                     const LossWeights& w, StepStats* stats = nullptr);

// AdamW with decoupled weight decay and dual learning rates. Sparse rows
// that received no gradient this step keep their moments untouched.
void adamw_step(ParamStore& params, const std::map<int, Tensor>& grads,
                const std::map<int, std::vector<int>>& sparse_touched, const TrainConfig& cfg, int64_t step);

class Trainer {
public:
    Trainer(Model& model, std::vector<Session> sessions, SplitSpec split, TrainConfig cfg,
            nlohmann::json run_config);

    // Advances `steps` optimizer steps, appending one JSON line per step to
    // `metrics` when given. Aborts on non-finite loss.
    void run(int steps, std::ostream* metrics = nullptr);
    StepStats step_once();

    int64_t step() const { return step_; }
    void set_step(int64_t s) { step_ = s; }
    void save(const std::string& path) const;
    const StepStats& last_stats() const { return last_; }

private:
    Model& model_;
    std::vector<Session> sessions_;
    SplitSpec split_;
    TrainConfig cfg_;
    nlohmann::json run_config_;
    int64_t step_ = 0;
    StepStats last_;
};

}  // namespace synergen
