#include "smsdkl/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace smsdkl {

HyperparamSpace::HyperparamSpace(std::vector<Dimension> dims) : dims_(std::move(dims)) {
  std::set<std::string> names;
  for (const auto& d : dims_) {
    if (!names.insert(d.name).second)
      throw std::invalid_argument("duplicate dimension name: " + d.name);
    switch (d.kind) {
      case DimKind::kInteger:
        if (!(d.lo < d.hi)) throw std::invalid_argument("integer dim needs lo < hi: " + d.name);
        if (d.lo != std::floor(d.lo) || d.hi != std::floor(d.hi))
          throw std::invalid_argument("integer dim needs integral bounds: " + d.name);
        normalized_width_ += 1;
        break;
      case DimKind::kContinuous:
        if (!(d.lo < d.hi)) throw std::invalid_argument("continuous dim needs lo < hi: " + d.name);
        normalized_width_ += 1;
        break;
      case DimKind::kCategorical:
        if (d.levels < 2) throw std::invalid_argument("categorical dim needs >= 2 levels: " + d.name);
        normalized_width_ += d.levels;
        break;
    }
  }
}

bool HyperparamSpace::contains(const HyperparamVector& x) const {
  if (static_cast<int>(x.values.size()) != size()) return false;
  for (int i = 0; i < size(); ++i) {
    const auto& d = dims_[i];
    const double v = x.values[i];
    if (!std::isfinite(v)) return false;
    switch (d.kind) {
      case DimKind::kInteger:
        if (v != std::floor(v) || v < d.lo || v > d.hi) return false;
        break;
      case DimKind::kContinuous:
        if (v < d.lo || v > d.hi) return false;
        break;
      case DimKind::kCategorical:
        if (v != std::floor(v) || v < 0 || v >= d.levels) return false;
        break;
    }
  }
  return true;
}

void HyperparamSpace::require_contains(const HyperparamVector& x) const {
  if (!contains(x)) throw std::invalid_argument("hyperparameter vector outside its space");
}

HyperparamVector sample_uniform(const HyperparamSpace& space, Rng& rng) {
  HyperparamVector x;
  x.values.reserve(space.size());
  for (const auto& d : space.dims()) {
    switch (d.kind) {
      case DimKind::kInteger:
        x.values.push_back(static_cast<double>(
            rng.uniform_int(static_cast<std::int64_t>(d.lo), static_cast<std::int64_t>(d.hi))));
        break;
      case DimKind::kContinuous:
        x.values.push_back(rng.uniform(d.lo, d.hi));
        break;
      case DimKind::kCategorical:
        x.values.push_back(static_cast<double>(rng.uniform_int(0, d.levels - 1)));
        break;
    }
  }
  return x;
}

Eigen::VectorXd normalize(const HyperparamSpace& space, const HyperparamVector& x) {
  space.require_contains(x);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(space.normalized_width());
  int k = 0;
  for (int i = 0; i < space.size(); ++i) {
    const auto& d = space.dims()[i];
    const double v = x.values[i];
    switch (d.kind) {
      case DimKind::kInteger:
      case DimKind::kContinuous:
        out[k++] = (v - d.lo) / (d.hi - d.lo);
        break;
      case DimKind::kCategorical:
        out[k + static_cast<int>(v)] = 1.0;
        k += d.levels;
        break;
    }
  }
  return out;
}

Eigen::MatrixXd normalize_rows(const HyperparamSpace& space,
                               const std::vector<HyperparamVector>& xs) {
  Eigen::MatrixXd out(static_cast<int>(xs.size()), space.normalized_width());
  for (int n = 0; n < static_cast<int>(xs.size()); ++n)
    out.row(n) = normalize(space, xs[n]).transpose();
  return out;
}

SequenceDataset::SequenceDataset(std::vector<Instance> instances, int max_steps,
                                 int feature_width)
    : instances_(std::move(instances)), max_steps_(max_steps), feature_width_(feature_width) {
  if (max_steps_ < 1) throw std::invalid_argument("dataset needs max_steps >= 1");
  for (const auto& inst : instances_) {
    if (inst.obs.cols() != feature_width_)
      throw std::invalid_argument("instance feature width mismatch");
    if (inst.obs.rows() != inst.labels.size())
      throw std::invalid_argument("instance observation/label length mismatch");
    if (inst.length() < 1 || inst.length() > max_steps_)
      throw std::invalid_argument("instance length outside [1, T]");
    if (!inst.labels.allFinite() || !inst.obs.allFinite())
      throw std::invalid_argument("instance holds non-finite values");
  }
}

Filtration::Filtration(const SequenceDataset& parent, int t) : parent_(&parent), t_(t) {
  if (t < 1 || t > parent.max_steps())
    throw std::out_of_range("filtration index outside [1, T]");
}

void RunConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw std::invalid_argument(std::string(what) + " must be positive");
  };
  positive(n_init, "n_init");
  if (n_iters < 0) throw std::invalid_argument("n_iters must be >= 0");
  if (m_train < 0) throw std::invalid_argument("m_train must be >= 0");
  positive(candidate_pool, "candidate_pool");
  positive(embed_dim, "embed_dim");
  positive(feature_dim, "feature_dim");
  positive(subsample_threshold, "subsample_threshold");
  positive(subsample_size, "subsample_size");
  positive(lstm_hidden, "lstm_hidden");
  positive(set_width, "set_width");
  positive(mlp_width, "mlp_width");
  positive(instance_cap, "instance_cap");
  if (!(learn_rate > 0)) throw std::invalid_argument("learn_rate must be positive");
}

SequenceDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty dataset file: " + path);

  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) header.push_back(field);
  }
  if (header.size() < 4 || header[0] != "instance_id" || header[1] != "t" || header[2] != "e")
    throw std::runtime_error("dataset header must be instance_id,t,e,o1..od");
  const int d = static_cast<int>(header.size()) - 3;
  for (int j = 0; j < d; ++j)
    if (header[3 + j] != "o" + std::to_string(j + 1))
      throw std::runtime_error("dataset header must be instance_id,t,e,o1..od");

  struct Row {
    long id = 0;
    int t = 0;
    double e = 0.0;
    std::vector<double> o;
  };
  std::vector<Row> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    Row r;
    int col = 0;
    while (std::getline(ss, field, ',')) {
      switch (col) {
        case 0: r.id = std::stol(field); break;
        case 1: r.t = std::stoi(field); break;
        case 2: r.e = std::stod(field); break;
        default: r.o.push_back(std::stod(field)); break;
      }
      ++col;
    }
    if (static_cast<int>(r.o.size()) != d)
      throw std::runtime_error("dataset row " + std::to_string(lineno) + " has wrong width");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw std::runtime_error("dataset has no rows: " + path);

  std::vector<Instance> instances;
  int max_len = 0;
  size_t i = 0;
  long prev_id = rows[0].id - 1;
  while (i < rows.size()) {
    const long id = rows[i].id;
    if (id <= prev_id) throw std::runtime_error("dataset rows not sorted by instance_id");
    prev_id = id;
    size_t j = i;
    while (j < rows.size() && rows[j].id == id) ++j;
    const int len = static_cast<int>(j - i);
    Instance inst;
    inst.obs.resize(len, d);
    inst.labels.resize(len);
    for (int k = 0; k < len; ++k) {
      const Row& r = rows[i + k];
      if (r.t != k + 1)
        throw std::runtime_error("instance " + std::to_string(id) + " has non-contiguous t");
      for (int c = 0; c < d; ++c) inst.obs(k, c) = r.o[c];
      inst.labels[k] = r.e;
    }
    max_len = std::max(max_len, len);
    instances.push_back(std::move(inst));
    i = j;
  }
  return SequenceDataset(std::move(instances), max_len, d);
}

void save_dataset(const SequenceDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);
  out << "instance_id,t,e";
  for (int j = 1; j <= ds.feature_width(); ++j) out << ",o" << j;
  out << "\n";
  char buf[64];
  for (int i = 0; i < ds.size(); ++i) {
    const Instance& inst = ds.instance(i);
    for (int t = 0; t < inst.length(); ++t) {
      out << (i + 1) << "," << (t + 1);
      std::snprintf(buf, sizeof(buf), ",%.17g", inst.labels[t]);
      out << buf;
      for (int c = 0; c < ds.feature_width(); ++c) {
        std::snprintf(buf, sizeof(buf), ",%.17g", inst.obs(t, c));
        out << buf;
      }
      out << "\n";
    }
  }
}

}  // namespace smsdkl
