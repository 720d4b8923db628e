#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "synergen/attention.hpp"
#include "synergen/embeddings.hpp"
#include "synergen/params.hpp"
#include "synergen/tape.hpp"

namespace synergen {

struct ModelConfig {
    int layers = 2;
    int d_model = 64;
    int heads = 4;
    int mlp_hidden = 0;  // 0 => 4 * d_model
    EmbeddingDims dims;
    RopeConfig rope;
    int n_items = 0;
    int n_queries = 0;
    int n_actions = 4;
    uint64_t seed = 0;

    int head_dim() const { return d_model / heads; }
    int mlp_width() const { return mlp_hidden > 0 ? mlp_hidden : 4 * d_model; }
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

// One sequence element: fusion inputs plus attention metadata.
struct Token {
    TokenKind kind = TokenKind::context;
    int item_id = 0;                // context/ranking; ignored for retrieval
    std::optional<int> query_id;    // absent => zero query slot
    int action = 0;
    int64_t t = 0;
    int64_t req_group = 0;
    int64_t event_id = 0;
};

std::vector<TokenMeta> metas_of(const std::vector<Token>& tokens);

class Model {
public:
    Model(ModelConfig cfg, SemanticStore store);

    const ModelConfig& config() const { return cfg_; }
    void set_rope_base(double base) { cfg_.rope.base = base; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const SemanticStore& semantic() const { return store_; }

    // Single-token fusion values, mainly for inspection and tests.
    Tensor fuse_context(int item_id, int action) const;
    Tensor fuse_retrieval(std::optional<int> query_id, int action) const;
    Tensor fuse_ranking(std::optional<int> query_id, int item_id, int action) const;

private:
    ModelConfig cfg_;
    SemanticStore store_;
    ParamStore params_;
};

// Binds a model's parameters as tape leaves and builds the per-sequence
// computation graph.
class GraphRun {
public:
    GraphRun(const Model& model, Tape& tape, bool trainable);

    int pnode(const std::string& name) const;
    const std::map<std::string, int>& param_nodes() const { return nodes_; }

    int fuse_tokens(const std::vector<Token>& tokens);                                    // n x d
    int backbone(int fused, const std::vector<Token>& tokens, const MaskMatrix& mask);    // n x d
    int forward(const std::vector<Token>& tokens, const MaskMatrix& mask);                // fuse + backbone
    int retrieval_projection(int hidden);                                                 // n x (ds+dc)
    int ranking_logits(int hidden, const std::vector<int>& rows);                         // k x 1
    int item_embeddings(const std::vector<int>& item_ids);                                // k x (ds+dc)

private:
    const Model& model_;
    Tape& tape_;
    std::map<std::string, int> nodes_;
};

double retrieval_score(const Tensor& projected, const Tensor& item_embedding);

// Checkpoint: magic "SGCK", version, canonical run-config JSON, every
// parameter with its AdamW moments, step counter and RNG state.
struct Checkpoint {
    nlohmann::json run_config;
    int64_t step = 0;
    std::string rng_state;
    struct Entry {
        std::string name;
        bool sparse = false;
        Tensor value, m, v;
    };
    std::vector<Entry> tensors;
};

void save_checkpoint(const std::string& path, const nlohmann::json& run_config, const Model& model, int64_t step,
                     const std::string& rng_state);
Checkpoint load_checkpoint(const std::string& path);
void restore_params(Model& model, const Checkpoint& ckpt);

}  // namespace synergen
