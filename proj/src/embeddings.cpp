#include "synergen/embeddings.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "synergen/rng.hpp"

namespace synergen {

namespace {

constexpr char kMagic[4] = {'S', 'G', 'E', 'M'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ofstream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t read_u32(std::ifstream& in, const std::string& path) {
    uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("truncated file " + path);
    return v;
}

void normalize_rows(Tensor& t) {
    for (int r = 0; r < t.rows(); ++r) {
        double* row = t.row_ptr(r);
        double norm = 0.0;
        for (int c = 0; c < t.cols(); ++c) norm += row[c] * row[c];
        norm = std::sqrt(norm);
        if (norm > 0.0)
            for (int c = 0; c < t.cols(); ++c) row[c] /= norm;
    }
}

}  // namespace

void save_semantic_table(const std::string& path, const Tensor& table) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u32(out, static_cast<uint32_t>(table.rows()));
    write_u32(out, static_cast<uint32_t>(table.cols()));
    for (double v : table.data()) {
        float f = static_cast<float>(v);
        out.write(reinterpret_cast<const char*>(&f), 4);
    }
    if (!out) throw std::runtime_error("write failed for " + path);
}

Tensor load_semantic_table(const std::string& path, int expected_dim) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error(path + ": bad magic (not a semantic table file)");
    const uint32_t version = read_u32(in, path);
    if (version != kVersion) throw std::runtime_error(path + ": unsupported version " + std::to_string(version));
    const uint32_t rows = read_u32(in, path);
    const uint32_t dim = read_u32(in, path);
    if (expected_dim > 0 && static_cast<int>(dim) != expected_dim)
        throw std::runtime_error(path + ": dim mismatch, file has " + std::to_string(dim) + ", config wants " +
                                 std::to_string(expected_dim));
    Tensor t(static_cast<int>(rows), static_cast<int>(dim));
    for (size_t i = 0; i < t.size(); ++i) {
        float f = 0.0f;
        if (!in.read(reinterpret_cast<char*>(&f), 4)) throw std::runtime_error("truncated file " + path);
        t[i] = static_cast<double>(f);
    }
    t.check_finite("semantic table " + path);
    return t;
}

SemanticStore load_semantic(const std::string& item_path, const std::string& query_path, const EmbeddingDims& dims) {
    SemanticStore store;
    store.item_semantic = load_semantic_table(item_path, dims.d_item_semantic);
    store.query_semantic = load_semantic_table(query_path, dims.d_query);
    return store;
}

SemanticStore synth_semantic_store(const SynthSpec& spec, uint64_t seed) {
    auto rng = make_engine(seed, "semantic");
    Tensor item_centers = Tensor::randn(spec.n_clusters, spec.d_item_semantic, 1.0, rng);
    Tensor query_centers = Tensor::randn(spec.n_clusters, spec.d_query_semantic, 1.0, rng);
    normalize_rows(item_centers);
    normalize_rows(query_centers);

    SemanticStore store;
    store.item_semantic = Tensor(spec.catalog_size, spec.d_item_semantic);
    std::normal_distribution<double> jitter(0.0, 0.25 / std::sqrt(static_cast<double>(spec.d_item_semantic)));
    for (int i = 0; i < spec.catalog_size; ++i) {
        const int c = i % spec.n_clusters;
        for (int k = 0; k < spec.d_item_semantic; ++k)
            store.item_semantic.at(i, k) = item_centers.at(c, k) + jitter(rng);
    }
    normalize_rows(store.item_semantic);

    store.query_semantic = Tensor(spec.query_vocab, spec.d_query_semantic);
    std::normal_distribution<double> qjitter(0.0, 0.25 / std::sqrt(static_cast<double>(spec.d_query_semantic)));
    for (int q = 0; q < spec.query_vocab; ++q) {
        const int c = q % spec.n_clusters;
        for (int k = 0; k < spec.d_query_semantic; ++k)
            store.query_semantic.at(q, k) = query_centers.at(c, k) + qjitter(rng);
    }
    normalize_rows(store.query_semantic);
    return store;
}

}  // namespace synergen
