#include "mtpb/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mtpb {

namespace {

constexpr char kMagic[8] = {'M', 'T', 'P', 'B', 'P', 'A', 'R', 'M'};
constexpr std::uint32_t kVersion = 1;

bool has_prefix(const std::string& path, std::string_view prefix) {
  return prefix.empty() || std::string_view(path).substr(0, prefix.size()) == prefix;
}

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint truncated");
  return v;
}

}  // namespace

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t seed) {
  return fnv1a(s.data(), s.size(), seed);
}

Parameter& ParameterStore::add(const std::string& path, Mat init) {
  if (params_.count(path)) throw std::invalid_argument("duplicate parameter path: " + path);
  Parameter p;
  p.grad = Mat::Zero(init.rows(), init.cols());
  p.m = Mat::Zero(init.rows(), init.cols());
  p.v = Mat::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  return params_.emplace(path, std::move(p)).first->second;
}

bool ParameterStore::contains(const std::string& path) const { return params_.count(path) != 0; }

Parameter& ParameterStore::at(const std::string& path) {
  auto it = params_.find(path);
  if (it == params_.end()) throw std::out_of_range("unknown parameter path: " + path);
  return it->second;
}

const Parameter& ParameterStore::at(const std::string& path) const {
  auto it = params_.find(path);
  if (it == params_.end()) throw std::out_of_range("unknown parameter path: " + path);
  return it->second;
}

std::vector<std::string> ParameterStore::paths(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto& [k, _] : params_)
    if (has_prefix(k, prefix)) out.push_back(k);
  return out;
}

std::size_t ParameterStore::scalar_count(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& [k, p] : params_)
    if (has_prefix(k, prefix)) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

Snapshot ParameterStore::snapshot(std::string_view prefix) const {
  Snapshot s;
  for (const auto& [k, p] : params_)
    if (has_prefix(k, prefix)) s.emplace(k, p.value);
  return s;
}

void ParameterStore::restore(const Snapshot& snap) {
  for (const auto& [k, v] : snap) {
    auto& p = at(k);
    if (p.value.rows() != v.rows() || p.value.cols() != v.cols())
      throw std::invalid_argument("snapshot shape mismatch at " + k);
    p.value = v;
  }
}

void ParameterStore::erase(std::string_view prefix) {
  for (auto it = params_.begin(); it != params_.end();) {
    if (has_prefix(it->first, prefix))
      it = params_.erase(it);
    else
      ++it;
  }
}

void ParameterStore::merge_from(const ParameterStore& other, std::string_view prefix) {
  for (const auto& [k, p] : other.params_) {
    if (!has_prefix(k, prefix)) continue;
    if (contains(k))
      at(k).value = p.value;
    else
      add(k, p.value);
  }
}

std::uint64_t ParameterStore::hash(std::string_view prefix) const {
  std::uint64_t h = fnv1a(std::string_view("params"));
  for (const auto& [k, p] : params_) {
    if (!has_prefix(k, prefix)) continue;
    h = fnv1a(k, h);
    const std::int64_t dims[2] = {p.value.rows(), p.value.cols()};
    h = fnv1a(dims, sizeof(dims), h);
    h = fnv1a(p.value.data(), sizeof(double) * static_cast<std::size_t>(p.value.size()), h);
  }
  return h;
}

void ParameterStore::save(const std::filesystem::path& file, std::string_view prefix) const {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + file.string());
  os.write(kMagic, sizeof(kMagic));
  put(os, kVersion);
  put(os, static_cast<std::int64_t>(step_));
  std::uint64_t count = 0;
  for (const auto& [k, _] : params_)
    if (has_prefix(k, prefix)) ++count;
  put(os, count);
  for (const auto& [k, p] : params_) {
    if (!has_prefix(k, prefix)) continue;
    put(os, static_cast<std::uint32_t>(k.size()));
    os.write(k.data(), static_cast<std::streamsize>(k.size()));
    put(os, static_cast<std::uint64_t>(p.value.rows()));
    put(os, static_cast<std::uint64_t>(p.value.cols()));
    os.write(reinterpret_cast<const char*>(p.value.data()),
             static_cast<std::streamsize>(sizeof(double) * p.value.size()));
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + file.string());
}

void ParameterStore::load(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + file.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a parameter checkpoint: " + file.string());
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  step_ = static_cast<long>(get<std::int64_t>(is));
  const auto count = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is);
    std::string path(len, '\0');
    is.read(path.data(), len);
    const auto rows = static_cast<Eigen::Index>(get<std::uint64_t>(is));
    const auto cols = static_cast<Eigen::Index>(get<std::uint64_t>(is));
    Mat m(rows, cols);
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!is) throw std::runtime_error("checkpoint truncated at " + path);
    if (contains(path))
      at(path) = Parameter{m, Mat::Zero(rows, cols), Mat::Zero(rows, cols), Mat::Zero(rows, cols)};
    else
      add(path, std::move(m));
  }
}

Mat glorot(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-limit, limit);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Mat normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace mtpb
