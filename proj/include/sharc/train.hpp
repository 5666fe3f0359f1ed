// sharc/train.hpp
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

#ifndef SHARC_TRAIN_HPP
#define SHARC_TRAIN_HPP

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sharc/hclust.hpp"

namespace sharc {

// One supervision graph: k-NN structure, similarity values, ground-truth edge
// probabilities and densities, plus the composition needed to rebuild node
// features from level 0 on the tape (so gradients reach the front-end).
struct TrainLevel {
  int n = 0;
  std::vector<std::vector<int>> knn;
  std::vector<std::vector<int>> neigh_sets;
  std::vector<int> src, dst;
  std::vector<double> s_edge;          // S(i, j) per edge
  std::vector<double> p;               // ground-truth edge probability {0,1}
  std::vector<double> gate;            // 1 when d_i <= d_j, else 0 (Eq. gate)
  std::vector<double> d;               // ground-truth density per node
  // Composition relative to the previous level; empty at level 0.
  std::vector<std::vector<int>> members_prev;
  std::vector<int> z_prev;
};

struct RecordingGraphs {
  std::string recording_id;
  Mat x_raw;
  std::vector<TrainLevel> levels;
  int num_speakers = 0;

  std::size_t edge_count() const {
    std::size_t e = 0;
    for (const auto& l : levels) e += l.src.size();
    return e;
  }
  std::size_t node_count() const {
    std::size_t v = 0;
    for (const auto& l : levels) v += static_cast<std::size_t>(l.n);
    return v;
  }
};

struct TrainGraphSet {
  std::vector<RecordingGraphs> recordings;
  std::size_t total_edges = 0;
  std::size_t total_nodes = 0;

  void finalize() {
    total_edges = 0;
    total_nodes = 0;
    for (const auto& r : recordings) {
      total_edges += r.edge_count();
      total_nodes += r.node_count();
    }
  }
};

namespace detail {

inline std::vector<int> label_ids(const EmbeddingSequence& seq) {
  std::vector<int> ids(seq.size(), -1);
  std::map<std::string, int> table;
  for (int i = 0; i < seq.size(); ++i) {
    const std::string& l = seq.segments[i].speaker_label;
    if (l.empty())
      throw std::invalid_argument("unlabeled segment " + std::to_string(i) +
                                  " in recording " + seq.recording_id);
    auto [it, fresh] = table.emplace(l, static_cast<int>(table.size()));
    ids[i] = it->second;
  }
  return ids;
}

// Record the supervision data of one level graph.
inline TrainLevel level_record(const LevelGraph& g,
                               const std::vector<int>& node_label) {
  TrainLevel out;
  out.n = g.size();
  out.knn = g.knn;
  out.neigh_sets = g.neighbor_sets();
  g.flat_edges(out.src, out.dst);
  out.s_edge.resize(out.src.size());
  out.p.resize(out.src.size());
  for (std::size_t e = 0; e < out.src.size(); ++e) {
    out.s_edge[e] = g.similarity.values(out.src[e], out.dst[e]);
    out.p[e] = node_label[out.src[e]] == node_label[out.dst[e]] ? 1.0 : 0.0;
  }
  out.d.resize(out.n);
  for (int i = 0; i < out.n; ++i)
    out.d[i] = ground_truth_density(i, g.knn[i], node_label,
                                    g.similarity.values);
  out.gate.resize(out.src.size());
  for (std::size_t e = 0; e < out.src.size(); ++e)
    out.gate[e] = out.d[out.src[e]] <= out.d[out.dst[e]] ? 1.0 : 0.0;
  return out;
}

// Ground-truth link pass at tau = 0 with merges restricted to same-speaker
// pairs: for each node, one link to its lowest-index same-label candidate
// with no lower density.
inline std::vector<std::pair<int, int>> gt_link_pass(
    const LevelGraph& g, const TrainLevel& rec) {
  std::vector<std::pair<int, int>> links;
  std::size_t base = 0;
  for (int i = 0; i < g.size(); ++i) {
    int best = -1;
    for (std::size_t r = 0; r < g.knn[i].size(); ++r) {
      const int j = g.knn[i][r];
      if (rec.p[base + r] == 1.0 && rec.d[i] <= rec.d[j]) {
        if (best < 0 || j < best) best = j;
      }
    }
    if (best >= 0) links.emplace_back(i, best);
    base += g.knn[i].size();
  }
  return links;
}

}  // namespace detail

// Build the supervision graphs of one recording across clustering levels.
// Level 0 is the k-NN graph over the (possibly refined) segment embeddings;
// each next level contracts the connected components of the ground-truth
// candidate links (tau = 0) and aggregates features with the ground-truth
// densities. Recursion stops when no merge happens; the final level is the
// one-node-per-speaker graph whose edges are all negatives.
inline RecordingGraphs build_train_graphs(const EmbeddingSequence& seq,
                                          const Mat& x_used,
                                          SimilarityBackend& sim, int k,
                                          int max_levels = 15) {
  std::vector<int> labels = detail::label_ids(seq);
  RecordingGraphs rec;
  rec.recording_id = seq.recording_id;
  rec.x_raw = seq.matrix();
  rec.num_speakers =
      1 + *std::max_element(labels.begin(), labels.end());

  sim.prepare(seq, x_used);

  LevelGraph g;
  g.level = 0;
  g.identity = x_used;
  g.average = x_used;
  g.identity_origin.resize(seq.size());
  std::iota(g.identity_origin.begin(), g.identity_origin.end(), 0);
  g.members.resize(seq.size());
  for (int i = 0; i < seq.size(); ++i) g.members[i] = {i};
  build_level_edges(g, sim, k);

  std::vector<int> node_label = labels;
  TrainLevel cur = detail::level_record(g, node_label);
  rec.levels.push_back(cur);

  for (int level = 0; level < max_levels; ++level) {
    if (g.size() == 1) break;
    std::vector<std::pair<int, int>> links =
        detail::gt_link_pass(g, rec.levels.back());
    if (links.empty()) break;
    ClusterSet cs = connected_components(g.size(), links);
    if (cs.count() == g.size()) break;

    // Aggregate with ground-truth densities; remember the composition.
    std::vector<int> z(cs.count());
    std::vector<int> next_label(cs.count());
    const std::vector<double>& dens = rec.levels.back().d;
    for (int c = 0; c < cs.count(); ++c) {
      const auto& mem = cs.clusters[c];
      int zi = mem[0];
      for (int j : mem)
        if (dens[j] > dens[zi]) zi = j;
      z[c] = zi;
      next_label[c] = node_label[zi];
    }
    LevelGraph next = aggregate(g, dens, cs);
    build_level_edges(next, sim, k);

    TrainLevel lvl = detail::level_record(next, next_label);
    lvl.members_prev = cs.clusters;
    lvl.z_prev = z;
    rec.levels.push_back(std::move(lvl));
    g = std::move(next);
    node_label = std::move(next_label);
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

// Plain Eq. values for a prediction vector; used for spot checks and by the
// CLI. p_hat aligned with level.src order.
inline double loss_conn_value(const TrainLevel& l,
                              const std::vector<double>& p_hat,
                              std::size_t total_edges) {
  double acc = 0.0;
  for (std::size_t e = 0; e < l.src.size(); ++e) {
    if (l.gate[e] == 0.0) continue;
    const double q =
        std::clamp(p_hat[e], ad::kProbEps, 1.0 - ad::kProbEps);
    acc -= l.p[e] * std::log(q) + (1.0 - l.p[e]) * std::log(1.0 - q);
  }
  return acc / double(total_edges);
}

inline double loss_den_value(const TrainLevel& l,
                             const std::vector<double>& d_hat,
                             std::size_t total_nodes) {
  double acc = 0.0;
  for (int i = 0; i < l.n; ++i) {
    const double diff = l.d[i] - d_hat[i];
    acc += diff * diff;
  }
  return acc / double(total_nodes);
}

struct RecordingLoss {
  ad::Tape::Ref loss = nullptr;  // scalar, normalized by the global |E|, |V|
  double conn_sum = 0.0;         // un-normalized BCE sum of this recording
  double den_sum = 0.0;          // un-normalized squared-error sum
};

// Forward pass over all levels of one recording. Node features are rebuilt
// level by level from the level-0 embeddings so that, with the front-end
// included, gradients flow into it through identity selection and averaging.
inline RecordingLoss forward_recording_loss(ad::Tape& t, ScorerModel& model,
                                            const RecordingGraphs& rec,
                                            bool include_frontend,
                                            std::size_t total_edges,
                                            std::size_t total_nodes) {
  ad::Tape::Ref x = t.constant(rec.x_raw);
  ad::Tape::Ref xu = include_frontend ? model.input_embeddings(t, x) : x;

  RecordingLoss out;
  ad::Tape::Ref conn = nullptr;
  ad::Tape::Ref den = nullptr;
  ad::Tape::Ref prev_identity = xu;
  for (std::size_t l = 0; l < rec.levels.size(); ++l) {
    const TrainLevel& lvl = rec.levels[l];
    ad::Tape::Ref identity =
        l == 0 ? xu : t.gather_rows(prev_identity, lvl.z_prev);
    ad::Tape::Ref average =
        l == 0 ? xu : t.mean_rows_over(prev_identity, lvl.members_prev);
    ad::Tape::Ref h = t.hcat(identity, average);
    ad::Tape::Ref lat = model.latents(t, h, lvl.neigh_sets);

    if (!lvl.src.empty()) {
      ad::Tape::Ref p_hat = model.edge_probabilities(t, lat, lvl.src, lvl.dst);
      const Eigen::Index ne = static_cast<Eigen::Index>(lvl.src.size());
      ad::Mat target = Eigen::Map<const Eigen::VectorXd>(lvl.p.data(), ne);
      ad::Mat gate = Eigen::Map<const Eigen::VectorXd>(lvl.gate.data(), ne);
      ad::Tape::Ref bce = t.bce_sum(p_hat, target, gate);
      ad::Tape::Ref d_hat = t.edge_density(p_hat, lvl.src, lvl.s_edge, lvl.n);
      ad::Mat d_target =
          Eigen::Map<const Eigen::VectorXd>(lvl.d.data(), lvl.n);
      ad::Tape::Ref mse = t.sq_err_sum(d_hat, d_target);
      conn = conn ? t.add(conn, bce) : bce;
      den = den ? t.add(den, mse) : mse;
    }
    prev_identity = identity;
  }
  if (!conn) conn = t.constant(ad::Mat::Zero(1, 1));
  if (!den) den = t.constant(ad::Mat::Zero(1, 1));
  out.conn_sum = conn->value(0, 0);
  out.den_sum = den->value(0, 0);
  out.loss = t.add(t.scale(conn, 1.0 / double(total_edges)),
                   t.scale(den, 1.0 / double(total_nodes)));
  return out;
}

struct LossParts {
  double conn = 0.0;
  double den = 0.0;
  double total() const { return conn + den; }
};

// Eq. total loss over the whole set (forward only).
inline LossParts total_loss(TrainGraphSet& set, ScorerModel& model,
                            bool include_frontend) {
  LossParts parts;
  for (const auto& rec : set.recordings) {
    ad::Tape t;
    RecordingLoss rl = forward_recording_loss(t, model, rec, include_frontend,
                                              set.total_edges,
                                              set.total_nodes);
    parts.conn += rl.conn_sum;
    parts.den += rl.den_sum;
  }
  parts.conn /= double(set.total_edges);
  parts.den /= double(set.total_nodes);
  return parts;
}

// ---------------------------------------------------------------------------
// Training stages.
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 500;
  double lr_gnn = 1e-3;
  double lr_frontend = 1e-6;
  int k_train = 60;
  std::uint64_t seed = 1;
  double alpha = 0.1;
  int max_levels = 15;
  ModelConfig model;
  ScorerKind scorer = ScorerKind::plda;
};

struct LossRecord {
  int epoch = 0;
  double conn = 0.0;
  double den = 0.0;
  double total = 0.0;
};

struct TrainResult {
  ScorerModel model;
  PldaModel plda;
  std::vector<LossRecord> log;
};

namespace detail {

inline SimilarityBackend make_backend(ScorerKind kind, double alpha,
                                      const PldaModel* plda,
                                      ScorerModel* model) {
  SimilarityBackend sim;
  sim.kind = kind;
  sim.alpha = alpha;
  sim.plda = plda;
  sim.model = model;
  return sim;
}

inline TrainGraphSet build_set(const std::vector<EmbeddingSequence>& data,
                               SimilarityBackend& sim, ScorerModel* refine,
                               int k, int max_levels) {
  TrainGraphSet set;
  for (const auto& seq : data) {
    Mat x_used = refine ? refine->refined_inputs(seq.matrix()) : seq.matrix();
    set.recordings.push_back(
        build_train_graphs(seq, x_used, sim, k, max_levels));
  }
  set.finalize();
  return set;
}

// One epoch of per-recording SGD steps in seeded shuffled order.
inline LossRecord run_epoch(TrainGraphSet& set, ScorerModel& model,
                            const std::vector<ad::Parameter*>& params,
                            bool include_frontend, double lr_frontend,
                            double lr_gnn, Rng& rng, int epoch) {
  std::vector<int> order(set.recordings.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  LossRecord rec_log;
  rec_log.epoch = epoch;
  for (int idx : order) {
    ad::Tape t;
    RecordingLoss rl =
        forward_recording_loss(t, model, set.recordings[idx], include_frontend,
                               set.total_edges, set.total_nodes);
    if (!std::isfinite(rl.loss->value(0, 0)))
      throw std::runtime_error("training diverged: non-finite loss at epoch " +
                               std::to_string(epoch) + ", recording " +
                               set.recordings[idx].recording_id);
    t.backward(rl.loss);
    ad::sgd_step(params, lr_frontend, lr_gnn);
    rec_log.conn += rl.conn_sum;
    rec_log.den += rl.den_sum;
  }
  rec_log.conn /= double(set.total_edges);
  rec_log.den /= double(set.total_nodes);
  rec_log.total = rec_log.conn + rec_log.den;
  return rec_log;
}

}  // namespace detail

// Stage: GNN module training. The front-end stays frozen at identity; the
// supervision graphs are built once from the raw embeddings.
inline TrainResult train_gnn(const std::vector<EmbeddingSequence>& data,
                             const TrainConfig& cfg,
                             const PldaModel* plda = nullptr) {
  if (data.empty()) throw std::invalid_argument("train_gnn: no recordings");
  TrainResult res;
  res.plda = (cfg.scorer == ScorerKind::plda)
                 ? (plda ? *plda : fit_plda(data))
                 : PldaModel{};
  res.model = ScorerModel::init(cfg.model);

  SimilarityBackend sim = detail::make_backend(
      cfg.scorer, cfg.alpha,
      cfg.scorer == ScorerKind::plda ? &res.plda : nullptr, nullptr);
  TrainGraphSet set =
      detail::build_set(data, sim, nullptr, cfg.k_train, cfg.max_levels);

  std::vector<ad::Parameter*> params = res.model.gnn_params();
  Rng rng(cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch)
    res.log.push_back(detail::run_epoch(set, res.model, params, false, 0.0,
                                        cfg.lr_gnn, rng, epoch));
  return res;
}

// Stage: joint fine-tuning. The front-end unfreezes with its own rate and the
// supervision graphs are rebuilt each epoch from the refined embeddings. The
// PLDA model is never updated.
inline TrainResult train_e2e(const std::vector<EmbeddingSequence>& data,
                             const ScorerModel& init, const PldaModel& plda,
                             const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_e2e: no recordings");
  TrainResult res;
  res.model = init;
  res.plda = plda;

  std::vector<ad::Parameter*> params = res.model.params();
  Rng rng(cfg.seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    SimilarityBackend sim = detail::make_backend(
        cfg.scorer, cfg.alpha,
        cfg.scorer == ScorerKind::plda ? &res.plda : nullptr, nullptr);
    TrainGraphSet set = detail::build_set(data, sim, &res.model, cfg.k_train,
                                          cfg.max_levels);
    res.log.push_back(detail::run_epoch(set, res.model, params, true,
                                        cfg.lr_frontend, cfg.lr_gnn, rng,
                                        epoch));
  }
  return res;
}

}  // namespace sharc

#endif  // SHARC_TRAIN_HPP
