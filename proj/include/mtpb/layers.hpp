#pragma once

#include <random>
#include <string>
#include <vector>

#include "mtpb/params.hpp"
#include "mtpb/tape.hpp"

namespace mtpb::nn {

/// Widths and depths shared by every learnable module.
struct LayerSpec {
  int d = 128;             // model width
  int d_q = 128;           // key width
  int heads = 4;
  int ffn = 512;           // feed-forward width
  int encoder_depth = 2;
  int decoder_depth = 1;   // transformer blocks per temporal stage

  /// Throws std::invalid_argument on non-positive counts or d % heads != 0.
  void validate() const;
};

/// y = x W^T + b with W: out x in, b: 1 x out.
Var linear(Var x, Var w, Var b);

void init_linear(ParameterStore& store, const std::string& prefix, int in, int out,
                 std::mt19937_64& rng, bool bias = true);
/// Applies the linear layer stored under `prefix` ("<prefix>/w", "<prefix>/b").
Var linear(Tape& tape, ParameterStore& store, const std::string& prefix, Var x);

void init_layer_norm(ParameterStore& store, const std::string& prefix, int width);

void init_transformer_block(ParameterStore& store, const std::string& prefix, int d, int ffn,
                            std::mt19937_64& rng);

/// Pre-norm transformer block over `blocks` stacked sequences of equal
/// length: x + MHA(LN(x)), then x + FFN(LN(x)). Throws on empty input.
Var transformer_block(Tape& tape, ParameterStore& store, const std::string& prefix, Var seq,
                      int blocks, int heads, std::vector<Mat>* attention_weights = nullptr);

/// Dense D^{-1}(A + I) of a nonnegative adjacency.
Mat normalized_adjacency(const Mat& a);

/// Graph convolution with self-loops and residual: H + ReLU(Ã H W) where
/// Ã = D^{-1}(A + I). `a` may be differentiable.
Var graph_conv(Var h, Var a, Var w);

/// Graph convolution applied independently at every time slot of node-major
/// stacked sequences: row i*len + j holds node i at slot j.
Var graph_conv_slots(Var h, Var a, Var w, int nodes, int len);

}  // namespace mtpb::nn
