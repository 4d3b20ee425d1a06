#pragma once

#include <map>
#include <string>
#include <vector>

#include "smsdkl/core.hpp"
#include "smsdkl/diffgraph.hpp"

namespace smsdkl {

// Widths of the three-part feature network: recurrent per-instance encoder
// -> permutation-invariant set embedding z -> feedforward head mapping
// [z, x_norm] to the feature vector g.
struct FeatureNetDims {
  int input_width = 0;   // observation width + 1 label channel
  int x_width = 0;       // normalized hyperparameter width
  int lstm_hidden = 50;
  int set_width = 32;
  int mlp_width = 32;
  int embed_dim = 1;
  int feature_dim = 32;

  static FeatureNetDims from_config(const RunConfig& cfg, int obs_width, int x_width);
};

// Creates every network parameter in the store: recurrent cell weights
// (gate row-blocks ordered input, forget, cell, output), the four set-encoder
// layers (rectified-linear, pooled after layer 2, linear output), and the
// three tanh head layers. Weights are uniform in [-1/sqrt(fan_in),
// +1/sqrt(fan_in)]; biases zero except the forget gate's, which starts at 1.
void init_feature_net(ParamStore& store, const FeatureNetDims& dims, Rng& rng);

// The store keys created by init_feature_net, in creation order.
std::vector<std::string> feature_net_param_names();

// Final hidden state after feeding the per-step rows [o_tau, e_tau];
// throws std::invalid_argument on an empty instance.
Eigen::VectorXd encode_instance(const ParamStore& store, const FeatureNetDims& dims,
                                const Eigen::Ref<const Mat>& obs,
                                const Eigen::Ref<const Eigen::VectorXd>& labels);

// Row i holds encode_instance of subset[i] under the filtration. The
// parallel variant writes disjoint rows from an OpenMP loop and matches the
// serial one bit for bit.
Mat encode_batch_serial(const ParamStore& store, const FeatureNetDims& dims,
                        const Filtration& filt, const std::vector<int>& subset);
Mat encode_batch_parallel(const ParamStore& store, const FeatureNetDims& dims,
                          const Filtration& filt, const std::vector<int>& subset);

// DeepSets embedding of the encoded rows: two rectified-linear layers per
// row, mean pool, two more layers on the pooled vector.
Eigen::VectorXd encode_set(const ParamStore& store, const FeatureNetDims& dims, const Mat& h);

// Head evaluation g = MLP([z, x_norm]).
Eigen::VectorXd feature_map(const ParamStore& store, const FeatureNetDims& dims,
                            const Eigen::VectorXd& z, const Eigen::VectorXd& x_norm);

// Stacked feature_map over the rows of x_rows (N x x_width) -> N x D.
// Evaluates row by row so each row equals feature_map exactly.
Mat feature_matrix(const ParamStore& store, const FeatureNetDims& dims,
                   const Eigen::VectorXd& z, const Mat& x_rows);

// Convenience: subsampled (or full) instance index list for one encoding
// pass; deterministic in rng.
std::vector<int> encoding_subset(int total, int cap, Rng& rng);

// --- Tape builders (training-time, differentiable end to end) ---

// Declares one tape input per parameter name and returns name -> node.
std::map<std::string, graph::NodeId> add_param_inputs(graph::Tape& tape,
                                                      const ParamStore& store,
                                                      const std::vector<std::string>& names);

// Binds every mapped input to the store's current values.
void bind_params(graph::Tape& tape, const std::map<std::string, graph::NodeId>& nodes,
                 const ParamStore& store);

// Accumulated parameter gradients after tape.backward(); negate for ascent.
std::map<std::string, Mat> collect_grads(const graph::Tape& tape,
                                         const std::map<std::string, graph::NodeId>& nodes);

// Builds the z embedding (1 x embed_dim row node) of the filtration's
// subset, with the per-step input rows and length masks baked in as
// constants.
graph::NodeId build_embedding(graph::Tape& tape,
                              const std::map<std::string, graph::NodeId>& params,
                              const FeatureNetDims& dims, const Filtration& filt,
                              const std::vector<int>& subset);

// Builds the feature rows G (N x D node) from the z node and fixed
// normalized inputs.
graph::NodeId build_feature_rows(graph::Tape& tape,
                                 const std::map<std::string, graph::NodeId>& params,
                                 const FeatureNetDims& dims, graph::NodeId z,
                                 const Mat& x_rows);

}  // namespace smsdkl
