#include "synergen/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace synergen {

void LossWeights::validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("loss weights: alpha must be in [0, 1]");
    if (tau <= 0.0) throw std::invalid_argument("loss weights: tau must be > 0");
    if (lambda < 0.0) throw std::invalid_argument("loss weights: lambda must be >= 0");
}

int infonce(Tape& tape, int sims, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("infonce: tau must be > 0");
    const Tensor& v = tape.value(sims);
    if (v.rows() != 1) throw std::invalid_argument("infonce: sims must be a row vector");
    if (v.cols() < 2) throw std::invalid_argument("infonce: empty negative set");
    const int scaled = tape.scale(sims, 1.0 / tau);
    const int lse = tape.logsumexp_rows(scaled);
    const int pos = tape.slice_cols(scaled, 0, 1);
    return tape.sub(lse, pos);
}

int retrieval_loss(Tape& tape, const std::vector<RetrievalTerms>& terms, const LossWeights& w) {
    w.validate();
    int easy_sum = -1;
    int hard_sum = -1;
    for (const RetrievalTerms& t : terms) {
        if (t.easy < 0) throw std::invalid_argument("retrieval_loss: every token needs an easy term");
        easy_sum = easy_sum < 0 ? t.easy : tape.add(easy_sum, t.easy);
        if (t.hard >= 0) hard_sum = hard_sum < 0 ? t.hard : tape.add(hard_sum, t.hard);
    }
    if (easy_sum < 0) return tape.constant(Tensor::scalar(0.0));
    int out = tape.scale(easy_sum, w.alpha);
    if (hard_sum >= 0) out = tape.add(out, tape.scale(hard_sum, 1.0 - w.alpha));
    return out;
}

int pointwise_bce(Tape& tape, int logits, const std::vector<double>& labels) {
    const int rows = tape.value(logits).rows();  // copy: adding nodes may invalidate references
    if (tape.value(logits).cols() != 1 || rows != static_cast<int>(labels.size()))
        throw std::invalid_argument("pointwise_bce: logits/labels mismatch");
    for (double y : labels)
        if (y != 0.0 && y != 1.0) throw std::invalid_argument("pointwise_bce: labels must be 0 or 1");
    // -[y log s(x) + (1-y) log(1-s(x))] == softplus(x) - y*x
    const int sp = tape.softplus(logits);
    const int ys = tape.mul(logits, tape.constant(Tensor(rows, 1, std::vector<double>(labels))));
    return tape.sum(tape.sub(sp, ys));
}

int pairwise_loss(Tape& tape, int logits, const std::vector<std::pair<int, int>>& pairs) {
    if (pairs.empty()) return tape.constant(Tensor::scalar(0.0));
    std::vector<int> pos, neg;
    pos.reserve(pairs.size());
    neg.reserve(pairs.size());
    for (const auto& [i, j] : pairs) {
        pos.push_back(i);
        neg.push_back(j);
    }
    // -log s(s_i - s_j) == softplus(s_j - s_i)
    const int diff = tape.sub(tape.gather_rows(logits, neg), tape.gather_rows(logits, pos));
    return tape.sum(tape.softplus(diff));
}

int ranking_loss(Tape& tape, int pointwise, int pairwise, const LossWeights& w) {
    w.validate();
    return tape.add(pointwise, tape.scale(pairwise, w.lambda));
}

int total_loss(Tape& tape, int retrieval, int ranking) { return tape.add(retrieval, ranking); }

double infonce_value(double pos_sim, const std::vector<double>& neg_sims, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("infonce_value: tau must be > 0");
    if (neg_sims.empty()) throw std::invalid_argument("infonce_value: empty negative set");
    double mx = pos_sim / tau;
    for (double s : neg_sims) mx = std::max(mx, s / tau);
    double z = std::exp(pos_sim / tau - mx);
    for (double s : neg_sims) z += std::exp(s / tau - mx);
    return mx + std::log(z) - pos_sim / tau;
}

double pointwise_bce_value(double logit, double label) {
    if (label != 0.0 && label != 1.0) throw std::invalid_argument("pointwise_bce_value: label must be 0 or 1");
    return std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit))) - label * logit;
}

double pairwise_value(double pos_logit, double neg_logit) {
    const double x = neg_logit - pos_logit;
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace synergen
