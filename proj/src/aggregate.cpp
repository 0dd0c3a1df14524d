#include "mtpb/aggregate.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace mtpb {

using nn::Tape;

void QueryConfig::validate() const {
  layers.validate();
  if (input_width <= 0) throw std::invalid_argument("query input width must be positive");
  if (scales.empty()) throw std::invalid_argument("at least one pattern scale is required");
  for (int c : scales)
    if (c <= 0) throw std::invalid_argument("pattern scales must be positive");
  if (k <= 0) throw std::invalid_argument("pattern count K must be positive");
}

PatternQuery::PatternQuery(QueryConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

std::string PatternQuery::scale_prefix(int s) const {
  return std::string(kPrefix) + "/" + std::to_string(s);
}

void PatternQuery::init(ParameterStore& store, std::mt19937_64& rng) const {
  const int d = cfg_.layers.d, dq = cfg_.layers.d_q;
  for (int s = 0; s < cfg_.num_scales(); ++s) {
    const std::string p = scale_prefix(s);
    store.add(p + "/key", normal_init(cfg_.k, dq, 1.0 / std::sqrt(static_cast<double>(dq)), rng));
    store.add(p + "/wq", glorot(dq, cfg_.input_width, rng));
    store.add(p + "/bq", Mat::Zero(1, dq));
    nn::init_linear(store, p + "/proj", cfg_.scales[s] * d, d, rng, false);
    nn::init_transformer_block(store, p + "/ts", d, cfg_.layers.ffn, rng);
  }
  nn::init_linear(store, std::string(kPrefix) + "/fuse", cfg_.num_scales() * d, d, rng);
}

void PatternQuery::check_bank(const PatternBank& bank) const {
  if (bank.scales != cfg_.scales)
    throw std::invalid_argument("pattern bank scales do not match the query configuration");
  if (bank.k != cfg_.k)
    throw std::invalid_argument("pattern bank has K=" + std::to_string(bank.k) + ", expected " +
                                std::to_string(cfg_.k));
  if (bank.d != cfg_.layers.d)
    throw std::invalid_argument("pattern bank width " + std::to_string(bank.d) +
                                " does not match d=" + std::to_string(cfg_.layers.d));
}

Var PatternQuery::scores(Tape& tape, ParameterStore& store, int s, Var queries) const {
  if (queries.cols() != cfg_.input_width)
    throw std::invalid_argument("pattern query rows have width " + std::to_string(queries.cols()) +
                                ", expected " + std::to_string(cfg_.input_width));
  const std::string p = scale_prefix(s);
  Var q = nn::linear(queries, tape.param(store, p + "/wq"), tape.param(store, p + "/bq"));
  Var raw = nn::matmul_nt(q, tape.param(store, p + "/key"));
  return cfg_.raw_scores ? raw : nn::softmax_rows(raw);
}

Var PatternQuery::projected_centroids(Tape& tape, ParameterStore& store, int s,
                                      const PatternBank& bank) const {
  return nn::linear(tape, store, scale_prefix(s) + "/proj", tape.constant(bank.centroids[s]));
}

Var PatternQuery::aggregate_scale(Tape& tape, ParameterStore& store, int s, Var retrievals,
                                  int nodes) const {
  const int len = static_cast<int>(retrievals.rows() / nodes);
  Var h = nn::transformer_block(tape, store, scale_prefix(s) + "/ts", retrievals, nodes,
                                cfg_.layers.heads);
  return nn::block_mean(h, nodes, len);
}

MetaKnowledge PatternQuery::meta_knowledge(Tape& tape, ParameterStore& store, const PatternBank& bank,
                                           Var queries, int nodes) const {
  check_bank(bank);
  if (nodes <= 0 || queries.rows() % nodes != 0)
    throw std::invalid_argument("meta_knowledge: query rows are not a whole number of nodes");
  MetaKnowledge out;
  for (int s = 0; s < cfg_.num_scales(); ++s) {
    Var r = retrieve_pattern(scores(tape, store, s, queries), projected_centroids(tape, store, s, bank));
    out.retrievals.push_back(r);
    out.scale_vectors.push_back(aggregate_scale(tape, store, s, r, nodes));
  }
  out.z = nn::linear(tape, store, std::string(kPrefix) + "/fuse", nn::concat_cols(out.scale_vectors));
  return out;
}

Var retrieve_pattern(Var omega, Var patterns) {
  if (omega.cols() != patterns.rows())
    throw std::invalid_argument("retrieve_pattern: " + std::to_string(omega.cols()) +
                                " weights for " + std::to_string(patterns.rows()) + " patterns");
  return nn::matmul(omega, patterns);
}

Mat row_stochastic(const Mat& a) {
  Mat out = Mat::Zero(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const double s = a.row(r).sum();
    if (s > 0.0) out.row(r) = a.row(r) / s;
  }
  return out;
}

void AttentionAdjacency::init(ParameterStore& store, std::mt19937_64& rng) const {
  nn::init_linear(store, std::string(kPrefix) + "/q", d_, d_, rng);
  nn::init_linear(store, std::string(kPrefix) + "/k", d_, d_, rng, false);
}

Var AttentionAdjacency::operator()(Tape& tape, ParameterStore& store, Var z) const {
  Var q = nn::linear(tape, store, std::string(kPrefix) + "/q", z);
  Var k = nn::linear(tape, store, std::string(kPrefix) + "/k", z);
  return nn::softmax_rows(nn::scale(nn::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d_))));
}

Reconstruction reconstruct_graph(Var z, Var a, Var a_prime, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("reconstruct_graph: gamma must be positive");
  const Eigen::Index n = z.rows();
  if (a.rows() != n || a.cols() != n || a_prime.rows() != n || a_prime.cols() != n)
    throw std::invalid_argument("reconstruct_graph: adjacency shapes do not match Z");
  if (!z.value().allFinite()) throw std::runtime_error("reconstruct_graph: non-finite Z");
  Tape& tape = z.tape();
  const Mat eye = Mat::Identity(n, n);
  Var gram = nn::matmul_nt(z, z);
  Var m = nn::add(gram, tape.constant(2.0 * gamma * eye));
  Var half = nn::scale(nn::add(a, a_prime), 0.5);
  Var rhs = nn::matmul(gram, nn::sub(tape.constant(eye), half));
  Reconstruction out;
  out.c = nn::add(half, nn::solve_spd(m, rhs));
  out.a_hat = nn::scale(nn::add(out.c, nn::transpose(out.c)), 0.5);
  out.a_used = nn::row_normalize(nn::relu(out.a_hat));
  return out;
}

double reconstruction_residual(const Mat& z, const Mat& a, const Mat& a_prime, double gamma,
                               const Mat& c) {
  const Mat gram = z * z.transpose();
  const Mat m = gram + 2.0 * gamma * Mat::Identity(z.rows(), z.rows());
  const Mat rhs = gram + gamma * (a + a_prime);
  const double scale = rhs.norm();
  return (m * c - rhs).norm() / (scale > 0.0 ? scale : 1.0);
}

void write_matrix_csv(const Mat& m, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << std::setprecision(17);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(r, c);
    out << '\n';
  }
}

}  // namespace mtpb
