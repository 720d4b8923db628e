#pragma once

#include <cstdint>
#include <vector>

#include "synergen/mask.hpp"
#include "synergen/tape.hpp"
#include "synergen/tensor.hpp"

namespace synergen {

enum class TokenKind { context, retrieval, ranking };

struct TokenMeta {
    TokenKind kind = TokenKind::context;
    int64_t t = 0;
    int64_t req_group = 0;
    int64_t event_id = 0;
};

struct RopeConfig {
    int64_t bucket_seconds = 1;  // timestamp granularity divisor
    double base = 10000.0;
    bool use_time_rope = true;  // false: rotate by sequence index instead
};

// Attention-permission matrix over a token sequence. A token may attend to
// itself, or to another token j when one of these holds:
//   context_i   and context_j   and t_i > t_j + theta
//   retrieval_i and context_j   and req_group_i > req_group_j
//   ranking_i   and context_j   and req_group_i > req_group_j
//   ranking_i   and retrieval_j and event_id_i == event_id_j
// theta gates only context->context edges; the self edge keeps every softmax
// row nonempty.
MaskMatrix build_mask(const std::vector<TokenMeta>& metas, int64_t theta = 0);

// Rotation angle for dim-pair k at bucketed time t is
// (t / bucket) / base^(2k / head_dim).
Tensor rope_angles(const std::vector<int64_t>& times, const RopeConfig& cfg, int head_dim);

// Rotation base for a given history span, calibrated so a span of 125000
// bucketed steps maps to a base of 7.8e6.
double select_rope_base(double history_span_seconds, double bucket_seconds);

// Single-head masked temporal attention: rotates q and k by each token's
// bucketed timestamp, scales scores by 1/sqrt(d_k), applies the masked
// softmax and returns the weighted value sum.
int attend(Tape& tape, int q, int k, int v, const std::vector<int64_t>& times, const RopeConfig& cfg,
           const MaskMatrix& mask);

}  // namespace synergen
