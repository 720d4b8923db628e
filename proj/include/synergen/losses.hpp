#pragma once

#include <utility>
#include <vector>

#include "synergen/tape.hpp"

namespace synergen {

struct LossWeights {
    double alpha = 0.1;   // easy/hard contrastive mix, in [0, 1]
    double tau = 0.085;   // InfoNCE temperature, > 0
    double lambda = 1.0;  // pairwise weight, >= 0

    void validate() const;
};

// Graph-building losses. All return scalar nodes.

// sims: [1 x (1+K)], first column the positive similarity. Log-sum-exp
// stabilized InfoNCE; throws if there are no negatives.
int infonce(Tape& tape, int sims, double tau);

// Per-retrieval-token InfoNCE terms. hard < 0 marks a token without hard
// negatives; it then contributes only through the easy term.
struct RetrievalTerms {
    int easy = -1;
    int hard = -1;
};
int retrieval_loss(Tape& tape, const std::vector<RetrievalTerms>& terms, const LossWeights& w);

// logits: [k x 1]; labels in {0, 1}. Sum of binary cross-entropies via the
// numerically safe softplus form.
int pointwise_bce(Tape& tape, int logits, const std::vector<double>& labels);

// pairs are (positive row, negative row) into logits; empty set gives 0.
int pairwise_loss(Tape& tape, int logits, const std::vector<std::pair<int, int>>& pairs);

int ranking_loss(Tape& tape, int pointwise, int pairwise, const LossWeights& w);
int total_loss(Tape& tape, int retrieval, int ranking);

// Closed-form scalar references used by tests and diagnostics.
double infonce_value(double pos_sim, const std::vector<double>& neg_sims, double tau);
double pointwise_bce_value(double logit, double label);
double pairwise_value(double pos_logit, double neg_logit);

}  // namespace synergen
