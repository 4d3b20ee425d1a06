#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "smsdkl/rng.hpp"

namespace smsdkl {

enum class DimKind { kInteger, kContinuous, kCategorical };

struct Dimension {
  std::string name;
  DimKind kind = DimKind::kContinuous;
  double lo = 0.0;   // range dims
  double hi = 1.0;   // range dims
  int levels = 0;    // categorical dims

  static Dimension integer(std::string name, double lo, double hi) {
    return {std::move(name), DimKind::kInteger, lo, hi, 0};
  }
  static Dimension continuous(std::string name, double lo, double hi) {
    return {std::move(name), DimKind::kContinuous, lo, hi, 0};
  }
  static Dimension categorical(std::string name, int levels) {
    return {std::move(name), DimKind::kCategorical, 0.0, 0.0, levels};
  }
};

// Mixed discrete/continuous search space. Validated at construction:
// lo < hi for range dims, >= 2 levels for categorical dims, unique names.
class HyperparamSpace {
 public:
  HyperparamSpace() = default;
  explicit HyperparamSpace(std::vector<Dimension> dims);

  const std::vector<Dimension>& dims() const { return dims_; }
  int size() const { return static_cast<int>(dims_.size()); }

  // Width of the normalized representation: one column per range dim,
  // one-hot block per categorical dim.
  int normalized_width() const { return normalized_width_; }

  bool contains(const struct HyperparamVector& x) const;
  void require_contains(const struct HyperparamVector& x) const;

 private:
  std::vector<Dimension> dims_;
  int normalized_width_ = 0;
};

// One point of a HyperparamSpace. Integer dims hold integral values,
// categorical dims hold the level index.
struct HyperparamVector {
  std::vector<double> values;

  bool operator==(const HyperparamVector& o) const { return values == o.values; }
};

HyperparamVector sample_uniform(const HyperparamSpace& space, Rng& rng);

// Affine [0,1] map per range dim, one-hot expansion per categorical dim.
Eigen::VectorXd normalize(const HyperparamSpace& space, const HyperparamVector& x);

// Row n is normalize(space, xs[n]).
Eigen::MatrixXd normalize_rows(const HyperparamSpace& space,
                               const std::vector<HyperparamVector>& xs);

// One sequence: obs is len x d, labels has len entries.
struct Instance {
  Eigen::MatrixXd obs;
  Eigen::VectorXd labels;

  int length() const { return static_cast<int>(obs.rows()); }
};

// Instances of up to T steps each with feature width d.
class SequenceDataset {
 public:
  SequenceDataset() = default;
  SequenceDataset(std::vector<Instance> instances, int max_steps, int feature_width);

  int size() const { return static_cast<int>(instances_.size()); }
  int max_steps() const { return max_steps_; }
  int feature_width() const { return feature_width_; }
  const Instance& instance(int i) const { return instances_[i]; }
  const std::vector<Instance>& instances() const { return instances_; }

 private:
  std::vector<Instance> instances_;
  int max_steps_ = 0;
  int feature_width_ = 0;
};

// Time truncation of a dataset: the first t steps of every instance
// (instances shorter than t contribute all their steps). A non-owning view.
class Filtration {
 public:
  Filtration(const SequenceDataset& parent, int t);

  int t() const { return t_; }
  int size() const { return parent_->size(); }
  int steps(int i) const { return std::min(t_, parent_->instance(i).length()); }
  Eigen::Ref<const Eigen::MatrixXd> obs(int i) const {
    return parent_->instance(i).obs.topRows(steps(i));
  }
  Eigen::Ref<const Eigen::VectorXd> labels(int i) const {
    return parent_->instance(i).labels.head(steps(i));
  }
  const SequenceDataset& parent() const { return *parent_; }

 private:
  const SequenceDataset* parent_;
  int t_;
};

inline Filtration filtration(const SequenceDataset& ds, int t) { return Filtration(ds, t); }

// Per-step evaluation history: inputs and observed scores for one step.
struct AcquisitionSet {
  int t = 0;
  std::vector<HyperparamVector> X;
  std::vector<double> y;

  int size() const { return static_cast<int>(X.size()); }
  void append(const HyperparamVector& x, double score) {
    X.push_back(x);
    y.push_back(score);
  }
};

struct RunConfig {
  int n_init = 5;            // random initial samples, shared across steps
  int n_iters = 40;          // BO iterations
  int m_train = 500;         // inner training iterations per BO iteration
  std::uint64_t seed = 0;
  int candidate_pool = 2000; // acquisition candidates per BO iteration
  int embed_dim = 1;         // width of the dataset embedding z_t
  int feature_dim = 32;      // width D of the feature map g_t
  int subsample_threshold = 32;  // step subsampling kicks in when T exceeds this
  int subsample_size = 32;

  // network sizes (shrunk for desk-scale experiments)
  int lstm_hidden = 50;
  int set_width = 32;
  int mlp_width = 32;
  int instance_cap = 256;    // encoder pools over at most this many instances

  double learn_rate = 1e-2;
  bool warm_start = true;    // keep network parameters across BO iterations
  bool share_noise = false;  // single (beta, lambda) pair shared over steps
  bool save_train_log = true;
  bool record_timing = false;

  void validate() const;
};

// Dataset file format: comma-separated with header
//   instance_id,t,e,o1..od
// rows sorted by (instance_id, t); t is 1-based and contiguous per instance.
SequenceDataset load_dataset(const std::string& path);
void save_dataset(const SequenceDataset& ds, const std::string& path);

}  // namespace smsdkl
