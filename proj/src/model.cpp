#include "synergen/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include "synergen/rng.hpp"

namespace synergen {

void ModelConfig::validate() const {
    if (layers < 1) throw std::invalid_argument("model config: layers must be >= 1");
    if (d_model < 2 || heads < 1 || d_model % heads != 0)
        throw std::invalid_argument("model config: d_model must be a positive multiple of heads");
    if (head_dim() % 2 != 0) throw std::invalid_argument("model config: head_dim must be even for RoPE");
    if (n_items < 1 || n_queries < 1 || n_actions < 1)
        throw std::invalid_argument("model config: vocabulary sizes must be positive");
    if (rope.bucket_seconds < 1 || rope.base <= 1.0)
        throw std::invalid_argument("model config: bad rope settings");
}

nlohmann::json ModelConfig::to_json() const {
    nlohmann::json j;
    j["layers"] = layers;
    j["d_model"] = d_model;
    j["heads"] = heads;
    j["mlp_hidden"] = mlp_hidden;
    j["d_item_semantic"] = dims.d_item_semantic;
    j["d_item_collab"] = dims.d_item_collab;
    j["d_query"] = dims.d_query;
    j["d_action"] = dims.d_action;
    j["rope"] = {{"bucket_seconds", rope.bucket_seconds}, {"base", rope.base}, {"use_time_rope", rope.use_time_rope}};
    j["n_items"] = n_items;
    j["n_queries"] = n_queries;
    j["n_actions"] = n_actions;
    j["seed"] = seed;
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"layers",  "d_model",  "heads",     "mlp_hidden", "d_item_semantic",
                                               "d_item_collab", "d_query", "d_action", "rope",       "n_items",
                                               "n_queries",     "n_actions", "seed"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw std::runtime_error("model config: unknown key '" + it.key() + "'");
    ModelConfig c;
    if (j.contains("layers")) c.layers = j["layers"];
    if (j.contains("d_model")) c.d_model = j["d_model"];
    if (j.contains("heads")) c.heads = j["heads"];
    if (j.contains("mlp_hidden")) c.mlp_hidden = j["mlp_hidden"];
    if (j.contains("d_item_semantic")) c.dims.d_item_semantic = j["d_item_semantic"];
    if (j.contains("d_item_collab")) c.dims.d_item_collab = j["d_item_collab"];
    if (j.contains("d_query")) c.dims.d_query = j["d_query"];
    if (j.contains("d_action")) c.dims.d_action = j["d_action"];
    if (j.contains("rope")) {
        const auto& r = j["rope"];
        static const std::set<std::string> rknown = {"bucket_seconds", "base", "use_time_rope"};
        for (auto it = r.begin(); it != r.end(); ++it)
            if (!rknown.count(it.key())) throw std::runtime_error("model config: unknown rope key '" + it.key() + "'");
        if (r.contains("bucket_seconds")) c.rope.bucket_seconds = r["bucket_seconds"];
        if (r.contains("base")) c.rope.base = r["base"];
        if (r.contains("use_time_rope")) c.rope.use_time_rope = r["use_time_rope"];
    }
    if (j.contains("n_items")) c.n_items = j["n_items"];
    if (j.contains("n_queries")) c.n_queries = j["n_queries"];
    if (j.contains("n_actions")) c.n_actions = j["n_actions"];
    if (j.contains("seed")) c.seed = j["seed"];
    return c;
}

std::vector<TokenMeta> metas_of(const std::vector<Token>& tokens) {
    std::vector<TokenMeta> metas;
    metas.reserve(tokens.size());
    for (const Token& t : tokens) metas.push_back(TokenMeta{t.kind, t.t, t.req_group, t.event_id});
    return metas;
}

Model::Model(ModelConfig cfg, SemanticStore store) : cfg_(std::move(cfg)), store_(std::move(store)) {
    if (cfg_.n_items == 0) cfg_.n_items = store_.item_semantic.rows();
    if (cfg_.n_queries == 0) cfg_.n_queries = store_.query_semantic.rows();
    cfg_.validate();
    if (store_.item_semantic.rows() != cfg_.n_items || store_.item_semantic.cols() != cfg_.dims.d_item_semantic)
        throw std::invalid_argument("item semantic table shape does not match config");
    if (store_.query_semantic.rows() != cfg_.n_queries || store_.query_semantic.cols() != cfg_.dims.d_query)
        throw std::invalid_argument("query semantic table shape does not match config");

    const int d = cfg_.d_model;
    const EmbeddingDims& e = cfg_.dims;
    struct Spec {
        std::string name;
        int rows, cols;
        bool sparse;
        enum { table, weight, one, zero } kind;
    };
    std::vector<Spec> specs;
    specs.push_back({"embed.item_collab", cfg_.n_items, e.d_item_collab, true, Spec::table});
    specs.push_back({"embed.action", cfg_.n_actions, e.d_action, true, Spec::table});
    specs.push_back({"embed.mask", 1, e.item_slot(), true, Spec::table});
    specs.push_back({"fusion.w1", e.slot_dim(), d, false, Spec::weight});
    specs.push_back({"fusion.b1", 1, d, false, Spec::zero});
    specs.push_back({"fusion.w2", d, d, false, Spec::weight});
    specs.push_back({"fusion.b2", 1, d, false, Spec::zero});
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        specs.push_back({p + "ln1.gain", 1, d, false, Spec::one});
        specs.push_back({p + "ln1.bias", 1, d, false, Spec::zero});
        specs.push_back({p + "attn.wq", d, d, false, Spec::weight});
        specs.push_back({p + "attn.wk", d, d, false, Spec::weight});
        specs.push_back({p + "attn.wv", d, d, false, Spec::weight});
        specs.push_back({p + "attn.wo", d, d, false, Spec::weight});
        specs.push_back({p + "ln2.gain", 1, d, false, Spec::one});
        specs.push_back({p + "ln2.bias", 1, d, false, Spec::zero});
        specs.push_back({p + "mlp.w1", d, cfg_.mlp_width(), false, Spec::weight});
        specs.push_back({p + "mlp.b1", 1, cfg_.mlp_width(), false, Spec::zero});
        specs.push_back({p + "mlp.w2", cfg_.mlp_width(), d, false, Spec::weight});
        specs.push_back({p + "mlp.b2", 1, d, false, Spec::zero});
    }
    specs.push_back({"final_ln.gain", 1, d, false, Spec::one});
    specs.push_back({"final_ln.bias", 1, d, false, Spec::zero});
    specs.push_back({"head.retrieval.w", d, e.item_slot(), false, Spec::weight});
    specs.push_back({"head.retrieval.b", 1, e.item_slot(), false, Spec::zero});
    specs.push_back({"head.rank.w1", d, d, false, Spec::weight});
    specs.push_back({"head.rank.b1", 1, d, false, Spec::zero});
    specs.push_back({"head.rank.w2", d, 1, false, Spec::weight});
    specs.push_back({"head.rank.b2", 1, 1, false, Spec::zero});

    for (size_t i = 0; i < specs.size(); ++i) {
        const Spec& s = specs[i];
        Tensor t;
        auto rng = make_engine(cfg_.seed, "init", i);
        switch (s.kind) {
            case Spec::table: t = Tensor::randn(s.rows, s.cols, 0.02, rng); break;
            case Spec::weight: t = Tensor::randn(s.rows, s.cols, 1.0 / std::sqrt(static_cast<double>(s.rows)), rng); break;
            case Spec::one: t = Tensor::full(s.rows, s.cols, 1.0); break;
            case Spec::zero: t = Tensor::zeros(s.rows, s.cols); break;
        }
        params_.add(s.name, std::move(t), s.sparse);
    }
}

namespace {

Token single(TokenKind kind, std::optional<int> query, int item, int action) {
    Token t;
    t.kind = kind;
    t.query_id = query;
    t.item_id = item;
    t.action = action;
    return t;
}

}  // namespace

Tensor Model::fuse_context(int item_id, int action) const {
    Tape tape;
    GraphRun run(*this, tape, false);
    int f = run.fuse_tokens({single(TokenKind::context, std::nullopt, item_id, action)});
    return tape.value(f);
}

Tensor Model::fuse_retrieval(std::optional<int> query_id, int action) const {
    Tape tape;
    GraphRun run(*this, tape, false);
    int f = run.fuse_tokens({single(TokenKind::retrieval, query_id, 0, action)});
    return tape.value(f);
}

Tensor Model::fuse_ranking(std::optional<int> query_id, int item_id, int action) const {
    Tape tape;
    GraphRun run(*this, tape, false);
    int f = run.fuse_tokens({single(TokenKind::ranking, query_id, item_id, action)});
    return tape.value(f);
}

GraphRun::GraphRun(const Model& model, Tape& tape, bool trainable) : model_(model), tape_(tape) {
    const ParamStore& ps = model.params();
    for (size_t i = 0; i < ps.count(); ++i) {
        const Param& p = ps.at(static_cast<int>(i));
        nodes_[p.name] = tape_.leaf(p.value, trainable);
    }
}

int GraphRun::pnode(const std::string& name) const {
    auto it = nodes_.find(name);
    if (it == nodes_.end()) throw std::out_of_range("GraphRun: unknown parameter " + name);
    return it->second;
}

int GraphRun::fuse_tokens(const std::vector<Token>& tokens) {
    const int n = static_cast<int>(tokens.size());
    if (n == 0) throw std::invalid_argument("fuse_tokens: empty sequence");
    const ModelConfig& cfg = model_.config();
    const EmbeddingDims& e = cfg.dims;
    const SemanticStore& sem = model_.semantic();

    // Query slot: frozen semantic rows, zeroed for context tokens and for
    // query-free task tokens.
    Tensor qslot(n, e.d_query);
    for (int i = 0; i < n; ++i) {
        const Token& t = tokens[i];
        if (t.kind == TokenKind::context || !t.query_id) continue;
        const int q = *t.query_id;
        if (q < 0 || q >= sem.query_semantic.rows())
            throw std::out_of_range("fuse_tokens: query id " + std::to_string(q) + " out of range");
        std::copy(sem.query_semantic.row_ptr(q), sem.query_semantic.row_ptr(q) + e.d_query, qslot.row_ptr(i));
    }

    // Item slot: [semantic; collaborative] for context/ranking tokens, the
    // trainable mask row for retrieval tokens.
    std::vector<int> nonret_pos, nonret_items, ret_pos;
    for (int i = 0; i < n; ++i) {
        if (tokens[i].kind == TokenKind::retrieval) {
            ret_pos.push_back(i);
        } else {
            nonret_pos.push_back(i);
            nonret_items.push_back(tokens[i].item_id);
        }
    }
    int item_slot = -1;
    int nonret_slot = -1;
    if (!nonret_pos.empty()) {
        Tensor sem_rows(static_cast<int>(nonret_pos.size()), e.d_item_semantic);
        for (size_t r = 0; r < nonret_items.size(); ++r) {
            const int it = nonret_items[r];
            if (it < 0 || it >= sem.item_semantic.rows())
                throw std::out_of_range("fuse_tokens: item id " + std::to_string(it) + " out of range");
            std::copy(sem.item_semantic.row_ptr(it), sem.item_semantic.row_ptr(it) + e.d_item_semantic,
                      sem_rows.row_ptr(static_cast<int>(r)));
        }
        nonret_slot = tape_.concat_cols(tape_.constant(std::move(sem_rows)),
                                        tape_.gather_rows(pnode("embed.item_collab"), nonret_items));
    }
    if (ret_pos.empty()) {
        item_slot = nonret_slot;
    } else {
        const int mask_rows = tape_.repeat_row(pnode("embed.mask"), static_cast<int>(ret_pos.size()));
        const int all = nonret_pos.empty() ? mask_rows : tape_.concat_rows(nonret_slot, mask_rows);
        std::vector<int> perm(n);
        for (size_t r = 0; r < nonret_pos.size(); ++r) perm[nonret_pos[r]] = static_cast<int>(r);
        for (size_t r = 0; r < ret_pos.size(); ++r) perm[ret_pos[r]] = static_cast<int>(nonret_pos.size() + r);
        item_slot = tape_.gather_rows(all, perm);
    }

    std::vector<int> actions;
    actions.reserve(n);
    for (const Token& t : tokens) actions.push_back(t.action);
    const int aslot = tape_.gather_rows(pnode("embed.action"), actions);

    const int slot = tape_.concat_cols(tape_.concat_cols(tape_.constant(std::move(qslot)), item_slot), aslot);
    const int h1 = tape_.relu(tape_.add_rowvec(tape_.matmul(slot, pnode("fusion.w1")), pnode("fusion.b1")));
    return tape_.add_rowvec(tape_.matmul(h1, pnode("fusion.w2")), pnode("fusion.b2"));
}

int GraphRun::backbone(int fused, const std::vector<Token>& tokens, const MaskMatrix& mask) {
    const ModelConfig& cfg = model_.config();
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    if (mask.size() != static_cast<int>(tokens.size())) throw std::invalid_argument("backbone: mask size mismatch");

    std::vector<int64_t> times;
    times.reserve(tokens.size());
    for (const Token& t : tokens) times.push_back(t.t);

    int x = fused;
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        const int ln1 = tape_.layer_norm(x, pnode(p + "ln1.gain"), pnode(p + "ln1.bias"));
        const int q = tape_.matmul(ln1, pnode(p + "attn.wq"));
        const int k = tape_.matmul(ln1, pnode(p + "attn.wk"));
        const int v = tape_.matmul(ln1, pnode(p + "attn.wv"));
        int heads_out = -1;
        for (int h = 0; h < cfg.heads; ++h) {
            const int qh = tape_.slice_cols(q, h * hd, (h + 1) * hd);
            const int kh = tape_.slice_cols(k, h * hd, (h + 1) * hd);
            const int vh = tape_.slice_cols(v, h * hd, (h + 1) * hd);
            const int oh = attend(tape_, qh, kh, vh, times, cfg.rope, mask);
            heads_out = h == 0 ? oh : tape_.concat_cols(heads_out, oh);
        }
        x = tape_.add(x, tape_.matmul(heads_out, pnode(p + "attn.wo")));
        const int ln2 = tape_.layer_norm(x, pnode(p + "ln2.gain"), pnode(p + "ln2.bias"));
        const int m1 = tape_.relu(tape_.add_rowvec(tape_.matmul(ln2, pnode(p + "mlp.w1")), pnode(p + "mlp.b1")));
        x = tape_.add(x, tape_.add_rowvec(tape_.matmul(m1, pnode(p + "mlp.w2")), pnode(p + "mlp.b2")));
    }
    (void)d;
    return tape_.layer_norm(x, pnode("final_ln.gain"), pnode("final_ln.bias"));
}

int GraphRun::forward(const std::vector<Token>& tokens, const MaskMatrix& mask) {
    return backbone(fuse_tokens(tokens), tokens, mask);
}

int GraphRun::retrieval_projection(int hidden) {
    return tape_.add_rowvec(tape_.matmul(hidden, pnode("head.retrieval.w")), pnode("head.retrieval.b"));
}

int GraphRun::ranking_logits(int hidden, const std::vector<int>& rows) {
    const int hr = tape_.gather_rows(hidden, rows);
    const int h1 = tape_.relu(tape_.add_rowvec(tape_.matmul(hr, pnode("head.rank.w1")), pnode("head.rank.b1")));
    return tape_.add_rowvec(tape_.matmul(h1, pnode("head.rank.w2")), pnode("head.rank.b2"));
}

int GraphRun::item_embeddings(const std::vector<int>& item_ids) {
    const SemanticStore& sem = model_.semantic();
    const EmbeddingDims& e = model_.config().dims;
    Tensor sem_rows(static_cast<int>(item_ids.size()), e.d_item_semantic);
    for (size_t r = 0; r < item_ids.size(); ++r) {
        const int it = item_ids[r];
        if (it < 0 || it >= sem.item_semantic.rows())
            throw std::out_of_range("item_embeddings: item id " + std::to_string(it) + " out of range");
        std::copy(sem.item_semantic.row_ptr(it), sem.item_semantic.row_ptr(it) + e.d_item_semantic,
                  sem_rows.row_ptr(static_cast<int>(r)));
    }
    return tape_.concat_cols(tape_.constant(std::move(sem_rows)),
                             tape_.gather_rows(pnode("embed.item_collab"), item_ids));
}

double retrieval_score(const Tensor& projected, const Tensor& item_embedding) {
    if (projected.size() != item_embedding.size())
        throw std::invalid_argument("retrieval_score: dimension mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < projected.size(); ++i) acc += projected[i] * item_embedding[i];
    return acc;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kCkptMagic[4] = {'S', 'G', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;

void put_u32(std::ofstream& o, uint32_t v) { o.write(reinterpret_cast<const char*>(&v), 4); }
void put_i64(std::ofstream& o, int64_t v) { o.write(reinterpret_cast<const char*>(&v), 8); }
void put_bytes(std::ofstream& o, const std::string& s) {
    put_i64(o, static_cast<int64_t>(s.size()));
    o.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void put_tensor(std::ofstream& o, const Tensor& t) {
    put_u32(o, static_cast<uint32_t>(t.rows()));
    put_u32(o, static_cast<uint32_t>(t.cols()));
    o.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * 8));
}

uint32_t get_u32(std::ifstream& in, const std::string& path) {
    uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("corrupt checkpoint " + path);
    return v;
}
int64_t get_i64(std::ifstream& in, const std::string& path) {
    int64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 8)) throw std::runtime_error("corrupt checkpoint " + path);
    return v;
}
std::string get_bytes(std::ifstream& in, const std::string& path) {
    const int64_t len = get_i64(in, path);
    if (len < 0 || len > (int64_t(1) << 40)) throw std::runtime_error("corrupt checkpoint " + path);
    std::string s(static_cast<size_t>(len), '\0');
    if (!in.read(s.data(), len)) throw std::runtime_error("corrupt checkpoint " + path);
    return s;
}
Tensor get_tensor(std::ifstream& in, const std::string& path) {
    const uint32_t rows = get_u32(in, path);
    const uint32_t cols = get_u32(in, path);
    Tensor t(static_cast<int>(rows), static_cast<int>(cols));
    if (!in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * 8)))
        throw std::runtime_error("corrupt checkpoint " + path);
    return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const nlohmann::json& run_config, const Model& model, int64_t step,
                     const std::string& rng_state) {
    std::ofstream o(path, std::ios::binary);
    if (!o) throw std::runtime_error("cannot write checkpoint " + path);
    o.write(kCkptMagic, 4);
    put_u32(o, kCkptVersion);
    put_bytes(o, run_config.dump());
    const ParamStore& ps = model.params();
    put_u32(o, static_cast<uint32_t>(ps.count()));
    for (size_t i = 0; i < ps.count(); ++i) {
        const Param& p = ps.at(static_cast<int>(i));
        put_bytes(o, p.name);
        o.put(p.sparse ? 1 : 0);
        put_tensor(o, p.value);
        put_tensor(o, p.m);
        put_tensor(o, p.v);
    }
    put_i64(o, step);
    put_bytes(o, rng_state);
    if (!o) throw std::runtime_error("write failed for checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw std::runtime_error(path + ": bad magic (not a checkpoint)");
    const uint32_t version = get_u32(in, path);
    if (version != kCkptVersion) throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.run_config = nlohmann::json::parse(get_bytes(in, path));
    const uint32_t count = get_u32(in, path);
    for (uint32_t i = 0; i < count; ++i) {
        Checkpoint::Entry e;
        e.name = get_bytes(in, path);
        e.sparse = in.get() != 0;
        e.value = get_tensor(in, path);
        e.m = get_tensor(in, path);
        e.v = get_tensor(in, path);
        c.tensors.push_back(std::move(e));
    }
    c.step = get_i64(in, path);
    c.rng_state = get_bytes(in, path);
    return c;
}

void restore_params(Model& model, const Checkpoint& ckpt) {
    ParamStore& ps = model.params();
    if (ckpt.tensors.size() != ps.count())
        throw std::runtime_error("checkpoint parameter count mismatch");
    for (const auto& e : ckpt.tensors) {
        Param& p = ps.get(e.name);
        if (!p.value.same_shape(e.value)) throw std::runtime_error("checkpoint shape mismatch for " + e.name);
        p.value = e.value;
        p.m = e.m;
        p.v = e.v;
    }
}

}  // namespace synergen
