#pragma once

#include <cstdint>
#include <string>

#include "synergen/events.hpp"
#include "synergen/tensor.hpp"

namespace synergen {

struct EmbeddingDims {
    int d_item_semantic = 128;
    int d_item_collab = 128;
    int d_query = 256;
    int d_action = 32;

    int item_slot() const { return d_item_semantic + d_item_collab; }
    int slot_dim() const { return d_query + item_slot() + d_action; }
};

// Frozen tables produced by a pretrained encoder (or our clustered stand-in).
// Never mutated by training.
struct SemanticStore {
    Tensor item_semantic;   // n_items x d_item_semantic
    Tensor query_semantic;  // n_queries x d_query
};

// Binary table file: magic "SGEM", version u32, row_count u32, dim u32,
// then row_count * dim little-endian float32.
void save_semantic_table(const std::string& path, const Tensor& table);
Tensor load_semantic_table(const std::string& path, int expected_dim);

SemanticStore load_semantic(const std::string& item_path, const std::string& query_path, const EmbeddingDims& dims);

// Clustered Gaussian stand-in: items of one cluster share a direction, and
// each query's embedding is aligned with its cluster, so semantic similarity
// is meaningful at desk scale.
SemanticStore synth_semantic_store(const SynthSpec& spec, uint64_t seed);

}  // namespace synergen
