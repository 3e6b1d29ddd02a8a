#include "avsdiff/contrastive.hpp"

#include <cmath>

namespace avsdiff {

NodeId similarity_node(Tape& tape, NodeId a, NodeId b) {
  const Tensor& va = tape.value(a);
  const Tensor& vb = tape.value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(1)) {
    throw DimensionError("similarity: need [B,D] pairs, got " + shape_to_string(va.shape()) +
                         " vs " + shape_to_string(vb.shape()));
  }
  NodeId an = tape.row_l2_normalize(a);
  NodeId bn = tape.row_l2_normalize(b);
  return tape.matmul(an, tape.transpose(bn));
}

Tensor similarity(const Tensor& a, const Tensor& b) {
  Tape tape;
  return tape.value(similarity_node(tape, tape.constant(a), tape.constant(b)));
}

NodeId info_nce_node(Tape& tape, NodeId z0, NodeId c, double temperature) {
  const Tensor& vz = tape.value(z0);
  if (vz.rank() != 2 || vz.dim(0) < 1) {
    throw ContractError("info_nce: need a non-empty [B,D] batch, got " +
                        shape_to_string(vz.shape()));
  }
  if (!(temperature > 0.0)) throw ContractError("info_nce: temperature must be > 0");
  NodeId scores = similarity_node(tape, z0, c);
  NodeId scaled = tape.affine(scores, 1.0 / temperature, 0.0);
  return tape.neg_mean_diag(tape.log_softmax_rows(scaled));
}

double info_nce(const Tensor& z0, const Tensor& c, double temperature) {
  Tape tape;
  return tape.value(info_nce_node(tape, tape.constant(z0), tape.constant(c), temperature)).item();
}

double mi_lower_bound(double loss, int batch) {
  if (batch < 1) throw ContractError("mi_lower_bound: batch must be >= 1");
  return std::log(static_cast<double>(batch)) - loss;
}

}  // namespace avsdiff
