#include "mtpb/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "mtpb/params.hpp"

namespace mtpb::nn {

const Mat& Var::value() const { return tape_->value(id_); }
const Mat& Var::grad() const { return tape_->grad(id_); }

const Mat& Tape::grad(int id) const {
  const auto& n = nodes_[id];
  return n.grad.size() == 0 ? empty_ : n.grad;
}

Var Tape::push(Mat value, std::vector<int> parents, Backward back) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (int p : parents) {
      if (nodes_[p].needs_grad) {
        n.needs_grad = true;
        break;
      }
    }
    if (n.needs_grad) n.back = std::move(back);
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::mix_kink_signature(const Mat& pre_activation) {
  std::uint64_t h = kink_signature_;
  for (Eigen::Index i = 0; i < pre_activation.size(); ++i) {
    h ^= pre_activation.data()[i] > 0.0 ? 0x9dU : 0x3bU;
    h *= 1099511628211ULL;
  }
  kink_signature_ = h;
}

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), nullptr, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), nullptr, record_});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(ParameterStore& store, const std::string& path) {
  Var v = leaf(store.value(path));
  if (record_) bindings_.push_back({v.id(), &store, path});
  return v;
}

void Tape::backward(Var out) {
  if (!record_) throw std::logic_error("backward on a non-recording tape");
  if (out.rows() != 1 || out.cols() != 1)
    throw std::invalid_argument("backward requires a 1x1 output");
  const int root = out.id();
  if (!nodes_[root].needs_grad) return;
  nodes_[root].grad = Mat::Ones(1, 1);
  for (int i = root; i >= 0; --i) {
    auto& n = nodes_[i];
    if (n.back && n.grad.size() != 0) n.back(*this, i);
  }
  for (const auto& b : bindings_) {
    const Mat& g = grad(b.node);
    if (g.size() == 0) continue;
    auto& p = b.store->at(b.path);
    if (p.grad.size() == 0) p.grad = Mat::Zero(p.value.rows(), p.value.cols());
    p.grad += g;
  }
}

namespace {

void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + what);
}

std::string shape(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same(const Var& a, const Var& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), op,
          "shape mismatch " + shape(a.value()) + " vs " + shape(b.value()));
}

}  // namespace

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul",
          "shape mismatch " + shape(a.value()) + " * " + shape(b.value()));
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  require(a.cols() == b.cols(), "matmul_nt",
          "shape mismatch " + shape(a.value()) + " * " + shape(b.value()) + "^T");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() * b.value().transpose(), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.needs_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

Var transpose(Var a) {
  Tape& t = a.tape();
  const int ia = a.id();
  return t.push(a.value().transpose(), {ia}, [ia](Tape& t, int self) {
    t.accumulate(ia, t.grad(self).transpose());
  });
}

Var add(Var a, Var b) {
  require_same(a, b, "add");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

Var hadamard(Var a, Var b) {
  require_same(a, b, "hadamard");
  Tape& t = a.tape();
  const int ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var scale(Var a, double s) {
  Tape& t = a.tape();
  const int ia = a.id();
  return t.push(a.value() * s, {ia}, [ia, s](Tape& t, int self) {
    t.accumulate(ia, t.grad(self) * s);
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = a.tape();
  const int ia = a.id();
  return t.push(a.value().array() + s, {ia}, [ia](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
  });
}

Var add_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row",
          "row " + shape(row.value()) + " does not broadcast over " + shape(a.value()));
  Tape& t = a.tape();
  const int ia = a.id(), ir = row.id();
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return t.push(std::move(out), {ia, ir}, [ia, ir](Tape& t, int self) {
    const Mat& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.needs_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

Var mul_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "mul_row",
          "row " + shape(row.value()) + " does not broadcast over " + shape(a.value()));
  Tape& t = a.tape();
  const int ia = a.id(), ir = row.id();
  Mat out = a.value().array().rowwise() * row.value().row(0).array();
  return t.push(std::move(out), {ia, ir}, [ia, ir](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(ia)) {
      Mat ga = g.array().rowwise() * t.value(ir).row(0).array();
      t.accumulate(ia, ga);
    }
    if (t.needs_grad(ir)) t.accumulate(ir, g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

Var relu(Var a) {
  Tape& t = a.tape();
  const int ia = a.id();
  t.mix_kink_signature(a.value());
  return t.push(a.value().cwiseMax(0.0), {ia}, [ia](Tape& t, int self) {
    Mat g = (t.value(ia).array() > 0.0).select(t.grad(self), 0.0);
    t.accumulate(ia, g);
  });
}

Var tanh(Var a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Mat out = a.value().array().tanh();
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Mat& y = t.value(self);
    Mat g = t.grad(self).array() * (1.0 - y.array().square());
    t.accumulate(ia, g);
  });
}

Var sigmoid(Var a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Mat out = (1.0 + (-a.value().array()).exp()).inverse();
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Mat& y = t.value(self);
    Mat g = t.grad(self).array() * y.array() * (1.0 - y.array());
    t.accumulate(ia, g);
  });
}

Var softmax_rows(Var a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Mat out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp();
    row /= row.sum();
  }
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Mat& y = t.value(self);
    const Mat& g = t.grad(self);
    Vec dots = g.cwiseProduct(y).rowwise().sum();
    Mat ga = y.array() * (g.colwise() - dots).array();
    t.accumulate(ia, ga);
  });
}

Var layer_norm(Var a, Var gamma, Var beta, double eps) {
  require(gamma.rows() == 1 && gamma.cols() == a.cols() && beta.rows() == 1 &&
              beta.cols() == a.cols(),
          "layer_norm", "affine parameters must be 1x" + std::to_string(a.cols()));
  Tape& t = a.tape();
  const int ia = a.id(), ig = gamma.id(), ib = beta.id();
  const Eigen::Index n = a.cols();
  const Mat& x = a.value();
  Mat xhat(x.rows(), n);
  Vec inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Mat out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return t.push(std::move(out), {ia, ig, ib},
                [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std), n](
                    Tape& t, int self) {
                  const Mat& g = t.grad(self);
                  if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                  if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
                  if (t.needs_grad(ia)) {
                    Mat dxhat = g.array().rowwise() * t.value(ig).row(0).array();
                    Vec m1 = dxhat.rowwise().sum() / static_cast<double>(n);
                    Vec m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / static_cast<double>(n);
                    Mat dx(dxhat.rows(), n);
                    for (Eigen::Index r = 0; r < dx.rows(); ++r)
                      dx.row(r) = inv_std(r) *
                                  (dxhat.row(r).array() - m1(r) - xhat.row(r).array() * m2(r));
                    t.accumulate(ia, dx);
                  }
                });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  require(rows * cols == a.value().size(), "reshape",
          shape(a.value()) + " cannot become " + std::to_string(rows) + "x" +
              std::to_string(cols));
  Tape& t = a.tape();
  const int ia = a.id();
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  return t.push(std::move(out), {ia}, [ia, r0, c0](Tape& t, int self) {
    const Mat& g = t.grad(self);
    t.accumulate(ia, Eigen::Map<const Mat>(g.data(), r0, c0));
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  Tape& t = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols", "row count mismatch");
    ids.push_back(p.id());
    widths.push_back(p.cols());
    cols += p.cols();
  }
  Mat out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return t.push(std::move(out), ids, [ids, widths](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Eigen::Index c = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.needs_grad(ids[i])) t.accumulate(ids[i], g.middleCols(c, widths[i]));
      c += widths[i];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  Tape& t = parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> heights;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows", "column count mismatch");
    ids.push_back(p.id());
    heights.push_back(p.rows());
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.push(std::move(out), ids, [ids, heights](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.needs_grad(ids[i])) t.accumulate(ids[i], g.middleRows(r, heights[i]));
      r += heights[i];
    }
  });
}

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows",
          "range out of bounds");
  Tape& t = a.tape();
  const int ia = a.id();
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return t.push(a.value().middleRows(begin, count), {ia},
                [ia, begin, count, r0, c0](Tape& t, int self) {
                  Mat g = Mat::Zero(r0, c0);
                  g.middleRows(begin, count) = t.grad(self);
                  t.accumulate(ia, g);
                });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  require(begin >= 0 && count >= 0 && begin + count <= a.cols(), "slice_cols",
          "range out of bounds");
  Tape& t = a.tape();
  const int ia = a.id();
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return t.push(a.value().middleCols(begin, count), {ia},
                [ia, begin, count, r0, c0](Tape& t, int self) {
                  Mat g = Mat::Zero(r0, c0);
                  g.middleCols(begin, count) = t.grad(self);
                  t.accumulate(ia, g);
                });
}

Var gather_rows(Var a, const std::vector<int>& index) {
  Tape& t = a.tape();
  const int ia = a.id();
  Mat out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] >= 0 && index[i] < a.rows(), "gather_rows", "index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return t.push(std::move(out), {ia}, [ia, index, r0, c0](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat ga = Mat::Zero(r0, c0);
    for (std::size_t i = 0; i < index.size(); ++i)
      ga.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(ia, ga);
  });
}

Var shift_in_blocks(Var a, int blocks, int len, int shift) {
  require(a.rows() == static_cast<Eigen::Index>(blocks) * len, "shift_in_blocks",
          "rows must equal blocks*len");
  require(shift >= 0, "shift_in_blocks", "negative shift");
  Tape& t = a.tape();
  const int ia = a.id();
  Mat out = Mat::Zero(a.rows(), a.cols());
  const int keep = std::max(0, len - shift);
  for (int b = 0; b < blocks; ++b)
    if (keep > 0) out.middleRows(b * len + shift, keep) = a.value().middleRows(b * len, keep);
  return t.push(std::move(out), {ia}, [ia, blocks, len, shift, keep](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat ga = Mat::Zero(g.rows(), g.cols());
    for (int b = 0; b < blocks; ++b)
      if (keep > 0) ga.middleRows(b * len, keep) = g.middleRows(b * len + shift, keep);
    t.accumulate(ia, ga);
  });
}

Var block_mean(Var a, int blocks, int len) {
  require(len > 0 && a.rows() == static_cast<Eigen::Index>(blocks) * len, "block_mean",
          "rows must equal blocks*len");
  Tape& t = a.tape();
  const int ia = a.id();
  Mat out(blocks, a.cols());
  for (int b = 0; b < blocks; ++b) out.row(b) = a.value().middleRows(b * len, len).colwise().mean();
  return t.push(std::move(out), {ia}, [ia, blocks, len](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat ga(static_cast<Eigen::Index>(blocks) * len, g.cols());
    for (int b = 0; b < blocks; ++b)
      ga.middleRows(b * len, len).rowwise() = g.row(b) / static_cast<double>(len);
    t.accumulate(ia, ga);
  });
}

Var row_normalize(Var a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Vec sums = a.value().rowwise().sum();
  Mat out = Mat::Zero(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    if (sums(r) != 0.0) out.row(r) = a.value().row(r) / sums(r);
  return t.push(std::move(out), {ia}, [ia, sums](Tape& t, int self) {
    const Mat& g = t.grad(self);
    const Mat& y = t.value(self);
    Mat ga = Mat::Zero(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (sums(r) == 0.0) continue;
      const double dot = g.row(r).dot(y.row(r));
      ga.row(r) = (g.row(r).array() - dot) / sums(r);
    }
    t.accumulate(ia, ga);
  });
}

Var sum(Var a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  return t.push(std::move(out), {ia}, [ia, r0, c0](Tape& t, int self) {
    t.accumulate(ia, Mat::Constant(r0, c0, t.grad(self)(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  require(n > 0, "mean", "empty input");
  return scale(sum(a), 1.0 / n);
}

Var sum_squares(Var a) {
  Tape& t = a.tape();
  const int ia = a.id();
  Mat out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.accumulate(ia, 2.0 * t.grad(self)(0, 0) * t.value(ia));
  });
}

Var mse(Var pred, const Mat& truth, const Mat& mask) {
  require(pred.rows() == truth.rows() && pred.cols() == truth.cols(), "mse",
          "shape mismatch " + shape(pred.value()) + " vs " + shape(truth));
  const bool masked = mask.size() != 0;
  if (masked)
    require(mask.rows() == truth.rows() && mask.cols() == truth.cols(), "mse",
            "mask shape mismatch");
  Tape& t = pred.tape();
  const int ip = pred.id();
  Mat w = masked ? Mat((mask.array() != 0.0).cast<double>()) : Mat::Ones(truth.rows(), truth.cols());
  const double count = w.sum();
  Mat resid = (pred.value() - truth).cwiseProduct(w);
  Mat out(1, 1);
  out(0, 0) = count > 0 ? resid.squaredNorm() / count : 0.0;
  return t.push(std::move(out), {ip}, [ip, resid = std::move(resid), count](Tape& t, int self) {
    if (count <= 0) return;
    t.accumulate(ip, resid * (2.0 * t.grad(self)(0, 0) / count));
  });
}

Var solve_spd(Var m, Var b) {
  require(m.rows() == m.cols(), "solve_spd", "matrix must be square");
  require(b.rows() == m.rows(), "solve_spd", "right-hand side row mismatch");
  if (!m.value().allFinite() || !b.value().allFinite())
    throw std::runtime_error("solve_spd: non-finite input");
  Eigen::LLT<Eigen::MatrixXd> llt(m.value());
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("solve_spd: matrix is not positive definite");
  Mat x = llt.solve(Eigen::MatrixXd(b.value()));
  Tape& t = m.tape();
  const int im = m.id(), ib = b.id();
  return t.push(std::move(x), {im, ib}, [im, ib, llt = std::move(llt)](Tape& t, int self) {
    // For symmetric M: dB = M^{-1} dX, dM = -dB X^T.
    Mat db = llt.solve(Eigen::MatrixXd(t.grad(self)));
    if (t.needs_grad(im)) t.accumulate(im, -db * t.value(self).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, db);
  });
}

Var attention(Var q, Var k, Var v, int blocks, int heads, std::vector<Mat>* weights_out) {
  require_same(q, k, "attention");
  require_same(q, v, "attention");
  require(blocks > 0 && q.rows() % blocks == 0, "attention", "rows not divisible by blocks");
  require(heads > 0 && q.cols() % heads == 0, "attention", "width not divisible by heads");
  const int len = static_cast<int>(q.rows() / blocks);
  require(len > 0, "attention", "empty sequence");
  const int dh = static_cast<int>(q.cols() / heads);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat& Q = q.value();
  const Mat& K = k.value();
  const Mat& V = v.value();
  Mat out(Q.rows(), Q.cols());
  std::vector<Mat> probs;
  probs.reserve(static_cast<std::size_t>(blocks) * heads);
  for (int b = 0; b < blocks; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto qb = Q.block(b * len, h * dh, len, dh);
      auto kb = K.block(b * len, h * dh, len, dh);
      auto vb = V.block(b * len, h * dh, len, dh);
      Mat s = (qb * kb.transpose()) * inv;
      for (int r = 0; r < len; ++r) {
        auto row = s.row(r);
        row.array() -= row.maxCoeff();
        row = row.array().exp();
        row /= row.sum();
      }
      out.block(b * len, h * dh, len, dh) = s * vb;
      probs.push_back(std::move(s));
    }
  }
  if (weights_out) *weights_out = probs;
  Tape& t = q.tape();
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return t.push(std::move(out), {iq, ik, iv},
                [iq, ik, iv, blocks, heads, len, dh, inv, probs = std::move(probs)](Tape& t,
                                                                                   int self) {
                  const Mat& G = t.grad(self);
                  const Mat& Q = t.value(iq);
                  const Mat& K = t.value(ik);
                  const Mat& V = t.value(iv);
                  Mat dQ = Mat::Zero(Q.rows(), Q.cols());
                  Mat dK = Mat::Zero(K.rows(), K.cols());
                  Mat dV = Mat::Zero(V.rows(), V.cols());
                  for (int b = 0; b < blocks; ++b) {
                    for (int h = 0; h < heads; ++h) {
                      const Mat& p = probs[static_cast<std::size_t>(b) * heads + h];
                      auto g = G.block(b * len, h * dh, len, dh);
                      auto qb = Q.block(b * len, h * dh, len, dh);
                      auto kb = K.block(b * len, h * dh, len, dh);
                      auto vb = V.block(b * len, h * dh, len, dh);
                      dV.block(b * len, h * dh, len, dh) = p.transpose() * g;
                      Mat dp = g * vb.transpose();
                      Vec dots = dp.cwiseProduct(p).rowwise().sum();
                      Mat ds = p.array() * (dp.colwise() - dots).array();
                      ds *= inv;
                      dQ.block(b * len, h * dh, len, dh) = ds * kb;
                      dK.block(b * len, h * dh, len, dh) = ds.transpose() * qb;
                    }
                  }
                  t.accumulate(iq, dQ);
                  t.accumulate(ik, dK);
                  t.accumulate(iv, dV);
                });
}

}  // namespace mtpb::nn
