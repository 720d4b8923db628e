#include "synergen/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace synergen {

namespace {

int64_t floor_div(int64_t a, int64_t b) {
    int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

}  // namespace

MaskMatrix build_mask(const std::vector<TokenMeta>& metas, int64_t theta) {
    if (theta < 0) throw std::invalid_argument("build_mask: theta must be >= 0");
    const int n = static_cast<int>(metas.size());
    MaskMatrix m(n);
    for (int i = 0; i < n; ++i) {
        const TokenMeta& a = metas[i];
        for (int j = 0; j < n; ++j) {
            if (i == j) {
                m.set(i, j, true);
                continue;
            }
            const TokenMeta& b = metas[j];
            bool ok = false;
            if (a.kind == TokenKind::context) {
                ok = b.kind == TokenKind::context && a.t > b.t + theta;
            } else if (a.kind == TokenKind::retrieval) {
                ok = b.kind == TokenKind::context && a.req_group > b.req_group;
            } else {  // ranking
                ok = (b.kind == TokenKind::context && a.req_group > b.req_group) ||
                     (b.kind == TokenKind::retrieval && a.event_id == b.event_id);
            }
            m.set(i, j, ok);
        }
    }
    return m;
}

Tensor rope_angles(const std::vector<int64_t>& times, const RopeConfig& cfg, int head_dim) {
    if (head_dim % 2 != 0) throw std::invalid_argument("rope_angles: head_dim must be even");
    if (cfg.bucket_seconds < 1) throw std::invalid_argument("rope_angles: bucket_seconds must be >= 1");
    if (cfg.base <= 1.0) throw std::invalid_argument("rope_angles: base must be > 1");
    const int half = head_dim / 2;
    Tensor angles(static_cast<int>(times.size()), half);
    // Unix-scale timestamps make t * inv_freq large enough that plain double
    // products lose ~1e-8 of angle; accumulate in long double and reduce
    // modulo 2*pi so absolute and relative rotations stay consistent.
    constexpr long double kTwoPi = 6.283185307179586476925286766559L;
    std::vector<long double> inv_freq(half);
    for (int k = 0; k < half; ++k)
        inv_freq[k] = 1.0L / powl(static_cast<long double>(cfg.base), 2.0L * k / head_dim);
    for (size_t r = 0; r < times.size(); ++r) {
        const long double tb = static_cast<long double>(floor_div(times[r], cfg.bucket_seconds));
        for (int k = 0; k < half; ++k)
            angles.at(static_cast<int>(r), k) = static_cast<double>(fmodl(tb * inv_freq[k], kTwoPi));
    }
    return angles;
}

double select_rope_base(double history_span_seconds, double bucket_seconds) {
    if (history_span_seconds <= 0.0 || bucket_seconds <= 0.0)
        throw std::invalid_argument("select_rope_base: inputs must be positive");
    const double effective_range = history_span_seconds / bucket_seconds;
    return 62.4 * effective_range;
}

int attend(Tape& tape, int q, int k, int v, const std::vector<int64_t>& times, const RopeConfig& cfg,
           const MaskMatrix& mask) {
    const int head_dim = tape.value(q).cols();
    std::vector<int64_t> eff_times;
    if (cfg.use_time_rope) {
        eff_times = times;
    } else {
        eff_times.resize(times.size());
        for (size_t i = 0; i < times.size(); ++i) eff_times[i] = static_cast<int64_t>(i);
    }
    RopeConfig eff = cfg;
    if (!cfg.use_time_rope) eff.bucket_seconds = 1;
    Tensor angles = rope_angles(eff_times, eff, head_dim);
    const int qr = tape.rope_rotate(q, angles);
    const int kr = tape.rope_rotate(k, angles);
    const int scores = tape.scale(tape.matmul_nt(qr, kr), 1.0 / std::sqrt(static_cast<double>(head_dim)));
    const int weights = tape.row_softmax_masked(scores, mask);
    return tape.matmul(weights, v);
}

}  // namespace synergen
