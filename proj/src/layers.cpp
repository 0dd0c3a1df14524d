#include "mtpb/layers.hpp"

#include <stdexcept>

namespace mtpb::nn {

void LayerSpec::validate() const {
  if (d <= 0 || d_q <= 0 || heads <= 0 || ffn <= 0 || encoder_depth <= 0 || decoder_depth <= 0)
    throw std::invalid_argument("LayerSpec: all counts must be positive");
  if (d % heads != 0) throw std::invalid_argument("LayerSpec: d must be divisible by heads");
}

Var linear(Var x, Var w, Var b) {
  if (x.cols() != w.cols())
    throw std::invalid_argument("linear: input width " + std::to_string(x.cols()) +
                                " does not match weight width " + std::to_string(w.cols()));
  return add_row(matmul_nt(x, w), b);
}

void init_linear(ParameterStore& store, const std::string& prefix, int in, int out,
                 std::mt19937_64& rng, bool bias) {
  store.add(prefix + "/w", glorot(out, in, rng));
  if (bias) store.add(prefix + "/b", Mat::Zero(1, out));
}

Var linear(Tape& tape, ParameterStore& store, const std::string& prefix, Var x) {
  Var w = tape.param(store, prefix + "/w");
  if (store.contains(prefix + "/b")) return linear(x, w, tape.param(store, prefix + "/b"));
  return matmul_nt(x, w);
}

void init_layer_norm(ParameterStore& store, const std::string& prefix, int width) {
  store.add(prefix + "/gamma", Mat::Ones(1, width));
  store.add(prefix + "/beta", Mat::Zero(1, width));
}

void init_transformer_block(ParameterStore& store, const std::string& prefix, int d, int ffn,
                            std::mt19937_64& rng) {
  init_layer_norm(store, prefix + "/ln1", d);
  init_linear(store, prefix + "/attn/q", d, d, rng);
  // A key bias shifts every score of a query equally and cancels in softmax.
  init_linear(store, prefix + "/attn/k", d, d, rng, false);
  init_linear(store, prefix + "/attn/v", d, d, rng);
  init_linear(store, prefix + "/attn/o", d, d, rng);
  init_layer_norm(store, prefix + "/ln2", d);
  init_linear(store, prefix + "/ff1", d, ffn, rng);
  init_linear(store, prefix + "/ff2", ffn, d, rng);
}

Var transformer_block(Tape& tape, ParameterStore& store, const std::string& prefix, Var seq,
                      int blocks, int heads, std::vector<Mat>* attention_weights) {
  if (seq.rows() == 0) throw std::invalid_argument("transformer_block: empty sequence");
  auto ln = [&](const std::string& name, Var x) {
    return layer_norm(x, tape.param(store, prefix + "/" + name + "/gamma"),
                      tape.param(store, prefix + "/" + name + "/beta"));
  };
  Var h = ln("ln1", seq);
  Var q = linear(tape, store, prefix + "/attn/q", h);
  Var k = linear(tape, store, prefix + "/attn/k", h);
  Var v = linear(tape, store, prefix + "/attn/v", h);
  Var a = attention(q, k, v, blocks, heads, attention_weights);
  Var x = add(seq, linear(tape, store, prefix + "/attn/o", a));
  Var f = relu(linear(tape, store, prefix + "/ff1", ln("ln2", x)));
  return add(x, linear(tape, store, prefix + "/ff2", f));
}

Mat normalized_adjacency(const Mat& a) {
  Mat out = a + Mat::Identity(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) /= out.row(r).sum();
  return out;
}

Var graph_conv_slots(Var h, Var a, Var w, int nodes, int len) {
  if (a.rows() != nodes || a.cols() != nodes)
    throw std::invalid_argument("graph_conv: adjacency is " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + ", expected " +
                                std::to_string(nodes) + "x" + std::to_string(nodes));
  if (h.rows() != static_cast<Eigen::Index>(nodes) * len)
    throw std::invalid_argument("graph_conv: feature rows do not match nodes*len");
  Tape& t = h.tape();
  const Eigen::Index d = h.cols();
  Var a_tilde = row_normalize(add(a, t.constant(Mat::Identity(nodes, nodes))));
  Var mixed = reshape(matmul(a_tilde, reshape(h, nodes, len * d)), static_cast<Eigen::Index>(nodes) * len, d);
  return add(h, relu(matmul(mixed, w)));
}

Var graph_conv(Var h, Var a, Var w) {
  return graph_conv_slots(h, a, w, static_cast<int>(h.rows()), 1);
}

}  // namespace mtpb::nn
