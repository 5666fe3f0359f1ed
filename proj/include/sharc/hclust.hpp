// sharc/hclust.hpp
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

#ifndef SHARC_HCLUST_HPP
#define SHARC_HCLUST_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sharc/dataio.hpp"
#include "sharc/gnn.hpp"
#include "sharc/similarity.hpp"

namespace sharc {

// One hierarchy level: node features, k-NN edges, similarity, densities and
// the level-0 segments each node represents.
struct LevelGraph {
  int level = 0;
  Mat identity;                            // N x D
  Mat average;                             // N x D
  std::vector<int> identity_origin;        // level-0 index of identity row
  std::vector<std::vector<int>> members;   // level-0 indices per node
  ScoreMatrix similarity;                  // N x N
  std::vector<std::vector<int>> knn;       // per-node neighbor lists

  int size() const { return static_cast<int>(identity.rows()); }

  int num_edges() const {
    int e = 0;
    for (const auto& v : knn) e += static_cast<int>(v.size());
    return e;
  }

  // Flattened directed edges in deterministic order: node 0's neighbors in
  // rank order, then node 1's, ...
  void flat_edges(std::vector<int>& src, std::vector<int>& dst) const {
    src.clear();
    dst.clear();
    for (int i = 0; i < size(); ++i)
      for (int j : knn[i]) {
        src.push_back(i);
        dst.push_back(j);
      }
  }

  // Neighbor sets for the graph layer; isolated nodes fall back to
  // themselves.
  std::vector<std::vector<int>> neighbor_sets() const {
    std::vector<std::vector<int>> sets(knn.begin(), knn.end());
    for (int i = 0; i < size(); ++i)
      if (sets[i].empty()) sets[i] = {i};
    return sets;
  }
};

// Edge probabilities (aligned with LevelGraph::flat_edges order) and node
// densities for one level.
struct EdgeScores {
  std::vector<double> p_hat;
  std::vector<double> density;
};

using EdgeScorerFn = std::function<EdgeScores(const LevelGraph&)>;

struct ClusterSet {
  std::vector<std::vector<int>> clusters;
  int count() const { return static_cast<int>(clusters.size()); }
};

// ---------------------------------------------------------------------------
// Similarity backends.
// ---------------------------------------------------------------------------

enum class ScorerKind { plda, cosine, gnn_pair, oracle };

inline ScorerKind scorer_kind_from_string(const std::string& s) {
  if (s == "plda") return ScorerKind::plda;
  if (s == "cosine") return ScorerKind::cosine;
  if (s == "gnn") return ScorerKind::gnn_pair;
  if (s == "oracle") return ScorerKind::oracle;
  throw std::invalid_argument("unknown scorer: " + s);
}

// Builds the similarity matrix over node identity features at any level.
// For PLDA the per-recording preprocessing runs once at level 0; higher
// levels index the processed vectors by the identity feature's origin.
class SimilarityBackend {
 public:
  ScorerKind kind = ScorerKind::plda;
  double alpha = 0.1;  // sigmoid temperature

  const PldaModel* plda = nullptr;     // kind == plda
  ScorerModel* model = nullptr;        // kind == gnn_pair
  std::vector<int> labels;             // kind == oracle (per level-0 segment)

  // Prepare recording-level state from the (possibly refined) level-0
  // vectors.
  void prepare(const EmbeddingSequence& seq, const Mat& x_used) {
    if (kind == ScorerKind::plda) {
      if (!plda) throw std::invalid_argument("plda backend without model");
      EmbeddingSequence tmp = seq;
      for (int i = 0; i < tmp.size(); ++i)
        tmp.segments[i].embedding = x_used.row(i);
      PreprocessResult res = preprocess(tmp, *plda);
      processed_ = res.processed;
      adapted_ = res.model;
    } else if (kind == ScorerKind::oracle) {
      if (static_cast<int>(labels.size()) != seq.size())
        throw std::invalid_argument("oracle backend: labels mismatch");
    } else if (kind == ScorerKind::gnn_pair && !model) {
      throw std::invalid_argument("gnn backend without model");
    }
  }

  ScoreMatrix build(const Mat& identity,
                    const std::vector<int>& origins) const {
    const int n = static_cast<int>(identity.rows());
    ScoreMatrix s;
    s.values = Mat::Zero(n, n);
    switch (kind) {
      case ScorerKind::plda: {
        ScoreMatrix raw;
        raw.values = Mat::Zero(n, n);
        for (int i = 0; i < n; ++i)
          for (int j = i + 1; j < n; ++j) {
            const double v = score_plda(processed_.row(origins[i]),
                                        processed_.row(origins[j]), adapted_);
            raw.values(i, j) = raw.values(j, i) = v;
          }
        return sigmoid_transform(raw, alpha);
      }
      case ScorerKind::cosine: {
        ScoreMatrix raw;
        raw.values = Mat::Zero(n, n);
        for (int i = 0; i < n; ++i)
          for (int j = i + 1; j < n; ++j) {
            const double v = score_cosine(identity.row(i), identity.row(j));
            raw.values(i, j) = raw.values(j, i) = v;
          }
        return sigmoid_transform(raw, alpha);
      }
      case ScorerKind::gnn_pair: {
        for (int i = 0; i < n; ++i)
          for (int j = i + 1; j < n; ++j) {
            const double p = 0.5 * (model->pair_probability(identity.row(i),
                                                            identity.row(j)) +
                                    model->pair_probability(identity.row(j),
                                                            identity.row(i)));
            s.values(i, j) = s.values(j, i) = p;
          }
        s.kind = ScoreMatrix::Kind::unit_interval;
        return s;
      }
      case ScorerKind::oracle: {
        for (int i = 0; i < n; ++i)
          for (int j = i + 1; j < n; ++j) {
            const double v =
                labels[origins[i]] == labels[origins[j]] ? 1.0 : 0.0;
            s.values(i, j) = s.values(j, i) = v;
          }
        s.kind = ScoreMatrix::Kind::unit_interval;
        return s;
      }
    }
    throw std::logic_error("unreachable");
  }

  const Mat& processed() const { return processed_; }
  const PldaModel& adapted_model() const { return adapted_; }

 private:
  Mat processed_;
  PldaModel adapted_;
};

// ---------------------------------------------------------------------------
// Edge scorers.
// ---------------------------------------------------------------------------

// GNN scorer: one forward pass over the level graph.
inline EdgeScorerFn make_gnn_edge_scorer(ScorerModel& model) {
  return [&model](const LevelGraph& g) {
    std::vector<int> src, dst;
    g.flat_edges(src, dst);
    EdgeScores out;
    out.density.assign(g.size(), 0.0);
    ad::Tape t;
    ad::Mat h(g.size(), g.identity.cols() + g.average.cols());
    h << g.identity, g.average;
    ad::Tape::Ref lat = model.latents(t, t.constant(h), g.neighbor_sets());
    if (!src.empty()) {
      ad::Tape::Ref p = model.edge_probabilities(t, lat, src, dst);
      std::vector<double> s_edge(src.size());
      for (std::size_t e = 0; e < src.size(); ++e)
        s_edge[e] = g.similarity.values(src[e], dst[e]);
      ad::Tape::Ref d = t.edge_density(p, src, s_edge, g.size());
      out.p_hat.resize(src.size());
      for (std::size_t e = 0; e < src.size(); ++e)
        out.p_hat[e] = p->value(static_cast<Eigen::Index>(e), 0);
      for (int i = 0; i < g.size(); ++i) out.density[i] = d->value(i, 0);
    }
    return out;
  };
}

// Oracle scorer: p_hat = 1 iff the identity origins carry the same label.
inline EdgeScorerFn make_oracle_edge_scorer(std::vector<int> labels) {
  return [labels = std::move(labels)](const LevelGraph& g) {
    EdgeScores out;
    out.density.assign(g.size(), 0.0);
    for (int i = 0; i < g.size(); ++i) {
      for (int j : g.knn[i]) {
        const bool same = labels[g.identity_origin[i]] ==
                          labels[g.identity_origin[j]];
        out.p_hat.push_back(same ? 1.0 : 0.0);
      }
    }
    std::size_t e = 0;
    for (int i = 0; i < g.size(); ++i) {
      std::vector<double> ehat(g.knn[i].size());
      for (std::size_t r = 0; r < g.knn[i].size(); ++r)
        ehat[r] = 2.0 * out.p_hat[e + r] - 1.0;
      out.density[i] = pseudo_density(i, g.knn[i], ehat, g.similarity.values);
      e += g.knn[i].size();
    }
    return out;
  };
}

// ---------------------------------------------------------------------------
// Clustering steps.
// ---------------------------------------------------------------------------

// Candidate edge set: neighbors j of i with d_i <= d_j (non-strict) and
// p_hat >= tau.
inline std::vector<int> candidate_edge_set(const LevelGraph& g,
                                           const EdgeScores& sc, int i,
                                           double tau) {
  std::vector<int> out;
  std::size_t base = 0;
  for (int a = 0; a < i; ++a) base += g.knn[a].size();
  for (std::size_t r = 0; r < g.knn[i].size(); ++r) {
    const int j = g.knn[i][r];
    if (sc.density[i] <= sc.density[j] && sc.p_hat[base + r] >= tau)
      out.push_back(j);
  }
  return out;
}

// For every node with a non-empty candidate set, one link to the candidate
// with the largest edge coefficient (equivalently largest p_hat), ties to the
// lower index.
inline std::vector<std::pair<int, int>> link_pass(const LevelGraph& g,
                                                  const EdgeScores& sc,
                                                  double tau) {
  std::vector<std::pair<int, int>> links;
  std::size_t base = 0;
  for (int i = 0; i < g.size(); ++i) {
    int best = -1;
    double best_p = 0.0;
    for (std::size_t r = 0; r < g.knn[i].size(); ++r) {
      const int j = g.knn[i][r];
      const double p = sc.p_hat[base + r];
      if (sc.density[i] <= sc.density[j] && p >= tau) {
        if (best < 0 || p > best_p || (p == best_p && j < best)) {
          best = j;
          best_p = p;
        }
      }
    }
    if (best >= 0) links.emplace_back(i, best);
    base += g.knn[i].size();
  }
  return links;
}

// Undirected connected components; clusters ordered by smallest member,
// members ascending.
inline ClusterSet connected_components(
    int n, const std::vector<std::pair<int, int>>& links) {
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  };
  for (auto [a, b] : links) {
    if (a < 0 || b < 0 || a >= n || b >= n)
      throw std::invalid_argument("connected_components: bad link");
    int ra = find(a), rb = find(b);
    if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
  }
  std::vector<std::vector<int>> by_root(n);
  for (int i = 0; i < n; ++i) by_root[find(i)].push_back(i);
  ClusterSet cs;
  for (int r = 0; r < n; ++r)
    if (!by_root[r].empty()) cs.clusters.push_back(std::move(by_root[r]));
  return cs;
}

// Eq. aggregation: identity feature of the densest member (ties to the lower
// index), average feature = mean of member identities.
inline LevelGraph aggregate(const LevelGraph& g,
                            const std::vector<double>& density,
                            const ClusterSet& cs) {
  LevelGraph next;
  next.level = g.level + 1;
  const int n = cs.count();
  next.identity.resize(n, g.identity.cols());
  next.average.resize(n, g.identity.cols());
  next.identity_origin.resize(n);
  next.members.resize(n);
  for (int c = 0; c < n; ++c) {
    const auto& mem = cs.clusters[c];
    int z = mem[0];
    for (int j : mem)
      if (density[j] > density[z]) z = j;  // ties keep the lower index
    next.identity.row(c) = g.identity.row(z);
    next.identity_origin[c] = g.identity_origin[z];
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(g.identity.cols());
    for (int j : mem) {
      acc += g.identity.row(j);
      next.members[c].insert(next.members[c].end(), g.members[j].begin(),
                             g.members[j].end());
    }
    next.average.row(c) = acc / double(mem.size());
    std::sort(next.members[c].begin(), next.members[c].end());
  }
  return next;
}

// Fill similarity + k-NN edges of a freshly aggregated level.
inline void build_level_edges(LevelGraph& g, const SimilarityBackend& sim,
                              int k) {
  g.similarity = sim.build(g.identity, g.identity_origin);
  g.knn = knn_edges(g.similarity, k);
}

inline LevelGraph next_level_graph(const LevelGraph& g,
                                   const std::vector<double>& density,
                                   const ClusterSet& cs,
                                   const SimilarityBackend& sim, int k) {
  LevelGraph next = aggregate(g, density, cs);
  build_level_edges(next, sim, k);
  return next;
}

// ---------------------------------------------------------------------------
// Full SHARC inference.
// ---------------------------------------------------------------------------

struct SharcOptions {
  int k = 30;
  double tau = 0.8;
  int max_levels = 15;
  double alpha = 0.1;
};

struct SharcResult {
  DiarizationHypothesis hypothesis;
  std::vector<int> segment_cluster;  // final cluster id per segment
  std::vector<std::string> cluster_names;
  int num_clusters = 0;
  int levels_run = 0;
  LevelGraph level0;  // kept for the overlap second pass
  Mat x_used;
};

// Density-ordered hierarchical merging: build the level graph, score edges,
// link, contract connected components, regenerate, until no link is chosen,
// a single node remains, or max_levels is hit.
inline SharcResult sharc_cluster(const EmbeddingSequence& x,
                                 SimilarityBackend& sim, ScorerModel* model,
                                 const SharcOptions& opt) {
  if (x.size() == 0) throw std::invalid_argument("sharc_cluster: empty input");
  if (opt.k < 1) throw std::invalid_argument("sharc_cluster: k must be >= 1");

  EdgeScorerFn edge_scorer;
  if (sim.kind == ScorerKind::oracle) {
    edge_scorer = make_oracle_edge_scorer(sim.labels);
  } else {
    if (!model)
      throw std::invalid_argument(
          "sharc_cluster: a scorer model is required unless the oracle "
          "backend is used");
    edge_scorer = make_gnn_edge_scorer(*model);
  }

  SharcResult res;
  res.x_used = model ? model->refined_inputs(x.matrix()) : x.matrix();
  sim.prepare(x, res.x_used);

  LevelGraph g;
  g.level = 0;
  g.identity = res.x_used;
  g.average = res.x_used;
  g.identity_origin.resize(x.size());
  std::iota(g.identity_origin.begin(), g.identity_origin.end(), 0);
  g.members.resize(x.size());
  for (int i = 0; i < x.size(); ++i) g.members[i] = {i};
  build_level_edges(g, sim, opt.k);
  res.level0 = g;

  for (int level = 0; level < opt.max_levels; ++level) {
    res.levels_run = level + 1;
    if (g.size() == 1) break;
    EdgeScores sc = edge_scorer(g);
    std::vector<std::pair<int, int>> links = link_pass(g, sc, opt.tau);
    if (links.empty()) break;
    ClusterSet cs = connected_components(g.size(), links);
    if (cs.count() == g.size()) break;
    g = next_level_graph(g, sc.density, cs, sim, opt.k);
  }

  // Final clusters -> per-segment labels, named by first segment occurrence.
  res.num_clusters = g.size();
  res.segment_cluster.assign(x.size(), -1);
  std::vector<int> order(g.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return g.members[a].front() < g.members[b].front();
  });
  res.cluster_names.resize(g.size());
  for (int rank = 0; rank < g.size(); ++rank) {
    const int c = order[rank];
    res.cluster_names[c] = "spk" + std::to_string(rank);
    for (int seg : g.members[c]) res.segment_cluster[seg] = c;
  }
  res.hypothesis.recording_id = x.recording_id;
  for (int i = 0; i < x.size(); ++i) {
    const auto& s = x.segments[i];
    res.hypothesis.segments.push_back(
        {s.onset, s.duration, res.cluster_names[res.segment_cluster[i]], ""});
  }
  return res;
}

}  // namespace sharc

#endif  // SHARC_HCLUST_HPP
