#pragma once

#include "avsdiff/autodiff.hpp"
#include "avsdiff/tensor.hpp"

namespace avsdiff {

/// Pairwise cosine scores: scores[i][j] = <a_i/|a_i|, b_j/|b_j|>. Throws on
/// zero-norm rows.
Tensor similarity(const Tensor& a, const Tensor& b);
NodeId similarity_node(Tape& tape, NodeId a, NodeId b);

/// Batch-internal InfoNCE with the positive on the diagonal:
///   -(1/B) sum_i log( exp(s_ii / tau) / sum_j exp(s_ij / tau) ).
/// Rows of the score matrix are latents, columns are conditions; the positive
/// term is included in its own denominator so the loss is >= 0.
double info_nce(const Tensor& z0, const Tensor& c, double temperature);
NodeId info_nce_node(Tape& tape, NodeId z0, NodeId c, double temperature);

/// InfoNCE mutual-information lower bound: log(B) - loss. Diagnostic only.
double mi_lower_bound(double loss, int batch);

}  // namespace avsdiff
