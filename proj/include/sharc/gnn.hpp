// sharc/gnn.hpp
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#ifndef SHARC_GNN_HPP
#define SHARC_GNN_HPP

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "sharc/autodiff.hpp"
#include "sharc/rng.hpp"
#include "sharc/serialize.hpp"

namespace sharc {

// Eq. style node feature for one node: identity feature (representative
// member, highest density) and average feature (mean of member identities).
// At level 0 both equal the segment embedding.
struct NodeFeature {
  Eigen::VectorXd identity;
  Eigen::VectorXd average;
};

struct ModelConfig {
  int dim = 16;            // embedding dimension D
  int d_hidden = 256;      // GNN layer width D''
  int frontend_layers = 1; // stacked D->D linear layers, identity at init
  std::vector<int> mlp_hidden = {1024, 1024};
  std::uint64_t seed = 1;
};

// Learnable scorer: embedding front-end, one mean-aggregation graph layer,
// and the edge classifier MLP {2*D'', hidden..., 2} with row softmax.
struct ScorerModel {
  ModelConfig cfg;
  std::vector<ad::Parameter> frontend_w, frontend_b;
  ad::Parameter gnn_w;  // (4D) x D''
  std::vector<ad::Parameter> mlp_w, mlp_b;

  static ScorerModel init(const ModelConfig& cfg) {
    if (cfg.dim < 1 || cfg.d_hidden < 1 || cfg.frontend_layers < 1)
      throw std::invalid_argument("bad model config");
    ScorerModel m;
    m.cfg = cfg;
    Rng rng(cfg.seed);
    auto glorot = [&rng](int rows, int cols) {
      ad::Mat w(rows, cols);
      const double lim = std::sqrt(6.0 / double(rows + cols));
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) w(r, c) = rng.uniform(-lim, lim);
      return w;
    };
    for (int l = 0; l < cfg.frontend_layers; ++l) {
      m.frontend_w.emplace_back("frontend_w" + std::to_string(l),
                                ad::Parameter::Group::frontend,
                                ad::Mat::Identity(cfg.dim, cfg.dim));
      m.frontend_b.emplace_back("frontend_b" + std::to_string(l),
                                ad::Parameter::Group::frontend,
                                ad::Mat::Zero(1, cfg.dim));
    }
    m.gnn_w = ad::Parameter("gnn_w", ad::Parameter::Group::gnn,
                            glorot(4 * cfg.dim, cfg.d_hidden));
    int in = 2 * cfg.d_hidden;
    std::vector<int> sizes = cfg.mlp_hidden;
    sizes.push_back(2);
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      m.mlp_w.emplace_back("mlp_w" + std::to_string(l),
                           ad::Parameter::Group::gnn, glorot(in, sizes[l]));
      m.mlp_b.emplace_back("mlp_b" + std::to_string(l),
                           ad::Parameter::Group::gnn,
                           ad::Mat::Zero(1, sizes[l]));
      in = sizes[l];
    }
    return m;
  }

  std::vector<ad::Parameter*> params() {
    std::vector<ad::Parameter*> out;
    for (auto& p : frontend_w) out.push_back(&p);
    for (auto& p : frontend_b) out.push_back(&p);
    out.push_back(&gnn_w);
    for (auto& p : mlp_w) out.push_back(&p);
    for (auto& p : mlp_b) out.push_back(&p);
    return out;
  }

  std::vector<ad::Parameter*> gnn_params() {
    std::vector<ad::Parameter*> out;
    out.push_back(&gnn_w);
    for (auto& p : mlp_w) out.push_back(&p);
    for (auto& p : mlp_b) out.push_back(&p);
    return out;
  }

  // ---- tape forward pieces ----

  ad::Tape::Ref frontend_forward(ad::Tape& t, ad::Tape::Ref x) {
    ad::Tape::Ref h = x;
    for (std::size_t l = 0; l < frontend_w.size(); ++l)
      h = t.add_row(t.matmul(h, t.param(frontend_w[l])),
                    t.param(frontend_b[l]));
    return h;
  }

  // E-SHARC input embeddings: average of raw and refined vectors. With an
  // identity front-end this is exactly the input.
  ad::Tape::Ref input_embeddings(ad::Tape& t, ad::Tape::Ref x_raw) {
    return t.scale(t.add(x_raw, frontend_forward(t, x_raw)), 0.5);
  }

  // One graph layer: h_i -> relu(W [h_i ; mean_{j in J_i} h_j]). Neighbor
  // sets must be non-empty; callers pass {i} for isolated nodes.
  ad::Tape::Ref latents(ad::Tape& t, ad::Tape::Ref h,
                        const std::vector<std::vector<int>>& neigh_sets) {
    ad::Tape::Ref m = t.mean_rows_over(h, neigh_sets);
    return t.relu(t.matmul(t.hcat(h, m), t.param(gnn_w)));
  }

  // Edge classifier on concatenated latent pairs; returns the "linked" class
  // probability per edge (Ex1).
  ad::Tape::Ref edge_probabilities(ad::Tape& t, ad::Tape::Ref latents,
                                   const std::vector<int>& src,
                                   const std::vector<int>& dst) {
    ad::Tape::Ref a =
        t.hcat(t.gather_rows(latents, src), t.gather_rows(latents, dst));
    for (std::size_t l = 0; l < mlp_w.size(); ++l) {
      a = t.add_row(t.matmul(a, t.param(mlp_w[l])), t.param(mlp_b[l]));
      if (l + 1 < mlp_w.size()) a = t.relu(a);
    }
    return t.slice_cols(t.softmax_rows(a), 1, 1);
  }

  // ---- plain helpers (forward only) ----

  ad::Mat frontend_apply(const ad::Mat& x) {
    ad::Tape t;
    return frontend_forward(t, t.constant(x))->value;
  }

  ad::Mat refined_inputs(const ad::Mat& x_raw) {
    ad::Tape t;
    return input_embeddings(t, t.constant(x_raw))->value;
  }

  ad::Mat latent_values(const ad::Mat& h,
                        const std::vector<std::vector<int>>& neigh_sets) {
    ad::Tape t;
    return latents(t, t.constant(h), neigh_sets)->value;
  }

  // p_hat for one directed pair of latent rows.
  double edge_probability(const ad::Mat& latent_rows, int i, int j) {
    if (i == j) throw std::invalid_argument("edge_probability: i == j");
    ad::Tape t;
    ad::Tape::Ref l = t.constant(latent_rows);
    return edge_probabilities(t, l, {i}, {j})->value(0, 0);
  }

  // Pairwise probability for two bare embeddings, used by the model-derived
  // similarity backend: the pair forms a two-node graph where each node's
  // neighborhood is the other node.
  double pair_probability(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    ad::Mat x(2, a.size());
    x.row(0) = a;
    x.row(1) = b;
    ad::Tape t;
    ad::Tape::Ref h = t.constant((ad::Mat(2, 2 * a.size()) << x, x).finished());
    ad::Tape::Ref l = latents(t, h, {{1}, {0}});
    return edge_probabilities(t, l, {0}, {1})->value(0, 0);
  }
};

// Eq.: d_i = (1/k) sum_{j in J_i} e_ij * S(i, j) with e = 2p - 1.
inline double pseudo_density(int i, const std::vector<int>& neighbors,
                             const std::vector<double>& e_hat,
                             const Eigen::MatrixXd& s) {
  if (neighbors.size() != e_hat.size())
    throw std::invalid_argument("pseudo_density: edge arrays mismatch");
  if (neighbors.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t r = 0; r < neighbors.size(); ++r)
    acc += e_hat[r] * s(i, neighbors[r]);
  return acc / double(neighbors.size());
}

// Ground-truth variant: e_ij = +1 when labels agree, -1 otherwise. Labels are
// integer ids; a negative id means missing.
inline double ground_truth_density(int i, const std::vector<int>& neighbors,
                                   const std::vector<int>& labels,
                                   const Eigen::MatrixXd& s) {
  if (neighbors.empty()) return 0.0;
  if (labels[i] < 0)
    throw std::invalid_argument("ground_truth_density: missing label");
  double acc = 0.0;
  for (int j : neighbors) {
    if (labels[j] < 0)
      throw std::invalid_argument("ground_truth_density: missing label");
    acc += (labels[j] == labels[i] ? 1.0 : -1.0) * s(i, j);
  }
  return acc / double(neighbors.size());
}

// ---------------------------------------------------------------------------
// Checkpoint serialization.
// ---------------------------------------------------------------------------

inline blob::Blob scorer_to_blob(const ScorerModel& m) {
  blob::Blob b;
  b.kind = "scorer";
  b.scalars["dim"] = m.cfg.dim;
  b.scalars["d_hidden"] = m.cfg.d_hidden;
  b.scalars["frontend_layers"] = m.cfg.frontend_layers;
  b.scalars["mlp_layers"] = double(m.cfg.mlp_hidden.size());
  for (std::size_t i = 0; i < m.cfg.mlp_hidden.size(); ++i)
    b.scalars["mlp_hidden" + std::to_string(i)] = m.cfg.mlp_hidden[i];
  b.scalars["seed"] = double(m.cfg.seed);
  for (std::size_t l = 0; l < m.frontend_w.size(); ++l) {
    b.matrices["frontend_w" + std::to_string(l)] = m.frontend_w[l].value;
    b.matrices["frontend_b" + std::to_string(l)] = m.frontend_b[l].value;
  }
  b.matrices["gnn_w"] = m.gnn_w.value;
  for (std::size_t l = 0; l < m.mlp_w.size(); ++l) {
    b.matrices["mlp_w" + std::to_string(l)] = m.mlp_w[l].value;
    b.matrices["mlp_b" + std::to_string(l)] = m.mlp_b[l].value;
  }
  return b;
}

inline ScorerModel scorer_from_blob(const blob::Blob& b) {
  if (b.kind != "scorer")
    throw std::runtime_error("expected scorer blob, got kind=" + b.kind);
  ModelConfig cfg;
  cfg.dim = static_cast<int>(b.scalar("dim"));
  cfg.d_hidden = static_cast<int>(b.scalar("d_hidden"));
  cfg.frontend_layers = static_cast<int>(b.scalar("frontend_layers"));
  cfg.seed = static_cast<std::uint64_t>(b.scalar_or("seed", 1));
  const int nl = static_cast<int>(b.scalar("mlp_layers"));
  cfg.mlp_hidden.clear();
  for (int i = 0; i < nl; ++i)
    cfg.mlp_hidden.push_back(
        static_cast<int>(b.scalar("mlp_hidden" + std::to_string(i))));
  ScorerModel m = ScorerModel::init(cfg);
  for (std::size_t l = 0; l < m.frontend_w.size(); ++l) {
    m.frontend_w[l].value = b.matrix("frontend_w" + std::to_string(l));
    m.frontend_b[l].value = b.matrix("frontend_b" + std::to_string(l));
  }
  m.gnn_w.value = b.matrix("gnn_w");
  for (std::size_t l = 0; l < m.mlp_w.size(); ++l) {
    m.mlp_w[l].value = b.matrix("mlp_w" + std::to_string(l));
    m.mlp_b[l].value = b.matrix("mlp_b" + std::to_string(l));
  }
  for (ad::Parameter* p : m.params())
    if (!p->value.allFinite())
      throw std::runtime_error("checkpoint parameter not finite: " + p->name);
  return m;
}

}  // namespace sharc

#endif  // SHARC_GNN_HPP
