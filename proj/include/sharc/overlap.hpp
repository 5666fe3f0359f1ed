// sharc/overlap.hpp
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

#ifndef SHARC_OVERLAP_HPP
#define SHARC_OVERLAP_HPP

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sharc/train.hpp"

namespace sharc {

struct OverlapAssignment {
  int segment_index = -1;
  std::string primary;
  std::string secondary;
};

namespace detail {

// k-NN selection on a masked similarity: only allowed destinations compete,
// per-node degree clamped to the allowed pool.
inline std::vector<std::vector<int>> masked_knn(
    const Mat& s, const std::vector<std::vector<char>>& allowed, int k) {
  const int n = static_cast<int>(s.rows());
  std::vector<std::vector<int>> out(n);
  std::vector<int> idx;
  for (int i = 0; i < n; ++i) {
    idx.clear();
    for (int j = 0; j < n; ++j)
      if (j != i && allowed[i][j]) idx.push_back(j);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      if (s(i, a) != s(i, b)) return s(i, a) > s(i, b);
      return a < b;
    });
    const int kk = std::min<int>(k, static_cast<int>(idx.size()));
    out[i].assign(idx.begin(), idx.begin() + kk);
  }
  return out;
}

}  // namespace detail

// Supervision graph for the overlap model: the adjacency excludes same-parent
// pairs except a seeded random fraction of retained intra-cluster pairs, and
// an edge is positive exactly when the destination's parent cluster is the
// source's true second speaker.
inline TrainLevel build_overlap_train_graph(
    const Mat& similarity, const std::vector<int>& parent,
    const std::vector<int>& second,  // -1 for clean segments
    int k, double keep_intra, std::uint64_t seed) {
  const int n = static_cast<int>(similarity.rows());
  if (static_cast<int>(parent.size()) != n ||
      static_cast<int>(second.size()) != n)
    throw std::invalid_argument("build_overlap_train_graph: label arrays "
                                "must match the node count");
  {
    const int first = parent.empty() ? -1 : parent[0];
    bool multi = false;
    for (int p : parent)
      if (p != first) multi = true;
    if (!multi)
      throw std::invalid_argument(
          "build_overlap_train_graph: recording has a single cluster, no "
          "cross-cluster edges possible");
  }

  Rng rng(seed);
  std::vector<std::vector<char>> allowed(n, std::vector<char>(n, 0));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      char a = parent[i] != parent[j] ? 1 : (rng.uniform() < keep_intra);
      allowed[i][j] = allowed[j][i] = a;
    }

  TrainLevel lvl;
  lvl.n = n;
  lvl.knn = detail::masked_knn(similarity, allowed, k);
  lvl.neigh_sets = lvl.knn;
  for (int i = 0; i < n; ++i)
    if (lvl.neigh_sets[i].empty()) lvl.neigh_sets[i] = {i};
  for (int i = 0; i < n; ++i)
    for (int j : lvl.knn[i]) {
      lvl.src.push_back(i);
      lvl.dst.push_back(j);
      lvl.s_edge.push_back(similarity(i, j));
      lvl.p.push_back(second[i] >= 0 && parent[j] == second[i] ? 1.0 : 0.0);
    }
  lvl.d.assign(n, 0.0);
  {
    std::vector<double> cnt(n, 0.0);
    for (std::size_t e = 0; e < lvl.src.size(); ++e) {
      lvl.d[lvl.src[e]] += (2.0 * lvl.p[e] - 1.0) * lvl.s_edge[e];
      cnt[lvl.src[e]] += 1.0;
    }
    for (int i = 0; i < n; ++i)
      if (cnt[i] > 0.0) lvl.d[i] /= cnt[i];
  }
  lvl.gate.resize(lvl.src.size());
  for (std::size_t e = 0; e < lvl.src.size(); ++e)
    lvl.gate[e] = lvl.d[lvl.src[e]] <= lvl.d[lvl.dst[e]] ? 1.0 : 0.0;
  return lvl;
}

// One overlap-training example: a labeled recording plus per-segment second
// speakers ("" when clean).
struct OverlapExample {
  EmbeddingSequence seq;
  std::vector<std::string> second_label;
};

struct OverlapTrainConfig {
  int epochs = 100;  // 5 when starting from a jointly fine-tuned model
  double lr = 1e-3;
  int k = 60;
  double keep_intra = 0.1;
  std::uint64_t seed = 1;
  double alpha = 0.1;
  ScorerKind scorer = ScorerKind::plda;
};

// Train the overlap scorer from an existing model's weights. Parent clusters
// come from the ground-truth primaries; the loss is the same BCE + MSE
// combination. The front-end stays frozen.
inline TrainResult train_overlap(const std::vector<OverlapExample>& data,
                                 const ScorerModel& init, const PldaModel& plda,
                                 const OverlapTrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train_overlap: no data");
  TrainResult res;
  res.model = init;
  res.plda = plda;

  TrainGraphSet set;
  Rng seed_stream(cfg.seed);
  for (const auto& ex : data) {
    std::vector<int> parent = detail::label_ids(ex.seq);
    if (static_cast<int>(ex.second_label.size()) != ex.seq.size())
      throw std::invalid_argument("train_overlap: second_label size mismatch");
    // Second labels resolved against the primary label table.
    std::map<std::string, int> table;
    for (int i = 0; i < ex.seq.size(); ++i)
      table.emplace(ex.seq.segments[i].speaker_label, parent[i]);
    std::vector<int> second(ex.seq.size(), -1);
    for (int i = 0; i < ex.seq.size(); ++i) {
      const std::string& s = ex.second_label[i];
      if (s.empty()) continue;
      auto it = table.find(s);
      second[i] = it == table.end() ? -1 : it->second;
    }

    Mat x_used = res.model.refined_inputs(ex.seq.matrix());
    SimilarityBackend sim = detail::make_backend(
        cfg.scorer, cfg.alpha,
        cfg.scorer == ScorerKind::plda ? &res.plda : nullptr, nullptr);
    sim.prepare(ex.seq, x_used);
    ScoreMatrix s = sim.build(x_used, [&] {
      std::vector<int> origins(ex.seq.size());
      std::iota(origins.begin(), origins.end(), 0);
      return origins;
    }());

    RecordingGraphs rec;
    rec.recording_id = ex.seq.recording_id;
    rec.x_raw = ex.seq.matrix();
    rec.num_speakers = 1 + *std::max_element(parent.begin(), parent.end());
    rec.levels.push_back(build_overlap_train_graph(
        s.values, parent, second, cfg.k, cfg.keep_intra,
        seed_stream.next_u64()));
    set.recordings.push_back(std::move(rec));
  }
  set.finalize();

  std::vector<ad::Parameter*> params = res.model.gnn_params();
  Rng rng(cfg.seed + 1);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch)
    res.log.push_back(detail::run_epoch(set, res.model, params, false, 0.0,
                                        cfg.lr, rng, epoch));
  return res;
}

struct OverlapAssignOptions {
  int k = 60;
  int k_prime = 30;
};

// Second-speaker assignment for the segments inside overlap regions. A new
// graph over all segments drops within-cluster connections; each overlapped
// node ranks its masked neighbors by model edge probability, keeps the top
// k', and takes the dominant parent cluster among them (ties resolved by
// summed probability, then by lower cluster ordinal). The mask guarantees the
// assignment differs from the primary.
inline std::vector<OverlapAssignment> assign_second_speaker(
    const EmbeddingSequence& x, const SharcResult& first_pass,
    const std::vector<OverlapRegion>& regions, ScorerModel& model,
    const OverlapAssignOptions& opt, bool* warned_single_cluster = nullptr) {
  if (opt.k_prime > opt.k)
    throw std::invalid_argument("assign_second_speaker: k_prime must be <= k");
  if (warned_single_cluster) *warned_single_cluster = false;
  std::vector<OverlapAssignment> out;
  if (first_pass.num_clusters < 2) {
    if (warned_single_cluster) *warned_single_cluster = true;
    return out;
  }

  const int n = x.size();
  const std::vector<int>& parent = first_pass.segment_cluster;
  std::vector<std::vector<char>> allowed(n, std::vector<char>(n, 0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      allowed[i][j] = (j != i && parent[i] != parent[j]) ? 1 : 0;

  const Mat& s = first_pass.level0.similarity.values;
  std::vector<std::vector<int>> knn = detail::masked_knn(s, allowed, opt.k);
  std::vector<std::vector<int>> sets = knn;
  for (int i = 0; i < n; ++i)
    if (sets[i].empty()) sets[i] = {i};

  // Model forward on the masked graph.
  std::vector<int> src, dst;
  for (int i = 0; i < n; ++i)
    for (int j : knn[i]) {
      src.push_back(i);
      dst.push_back(j);
    }
  ad::Tape t;
  ad::Mat h(n, 2 * first_pass.x_used.cols());
  h << first_pass.x_used, first_pass.x_used;
  ad::Tape::Ref lat = model.latents(t, t.constant(h), sets);
  std::vector<double> p_hat(src.size(), 0.0);
  if (!src.empty()) {
    ad::Tape::Ref p = model.edge_probabilities(t, lat, src, dst);
    for (std::size_t e = 0; e < src.size(); ++e)
      p_hat[e] = p->value(static_cast<Eigen::Index>(e), 0);
  }
  std::vector<std::size_t> offset(n + 1, 0);
  for (int i = 0; i < n; ++i) offset[i + 1] = offset[i] + knn[i].size();

  // Cluster ordinal for the final tie-break follows the spk naming.
  std::vector<int> ordinal(first_pass.cluster_names.size(), 0);
  for (std::size_t c = 0; c < first_pass.cluster_names.size(); ++c)
    ordinal[c] = std::stoi(first_pass.cluster_names[c].substr(3));

  for (int i = 0; i < n; ++i) {
    if (!segment_in_regions(x.segments[i], regions)) continue;
    if (knn[i].empty()) continue;
    std::vector<int> rank(knn[i].size());
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(), [&](int a, int b) {
      const double pa = p_hat[offset[i] + a], pb = p_hat[offset[i] + b];
      if (pa != pb) return pa > pb;
      return knn[i][a] < knn[i][b];
    });
    const int take = std::min<int>(opt.k_prime, static_cast<int>(rank.size()));
    std::map<int, std::pair<int, double>> votes;  // cluster -> (count, sum p)
    for (int r = 0; r < take; ++r) {
      const int j = knn[i][rank[r]];
      auto& v = votes[parent[j]];
      v.first += 1;
      v.second += p_hat[offset[i] + rank[r]];
    }
    int best = -1;
    for (const auto& [c, v] : votes) {
      if (best < 0) {
        best = c;
        continue;
      }
      const auto& b = votes[best];
      if (v.first > b.first ||
          (v.first == b.first && v.second > b.second) ||
          (v.first == b.first && v.second == b.second &&
           ordinal[c] < ordinal[best]))
        best = c;
    }
    out.push_back({i, first_pass.cluster_names[parent[i]],
                   first_pass.cluster_names[best]});
  }
  return out;
}

// Baseline variant: rank foreign neighbors by raw similarity instead of model
// probabilities.
inline std::vector<OverlapAssignment> baseline_overlap(
    const Mat& similarity, const std::vector<int>& labels,
    const std::vector<std::string>& label_names,
    const EmbeddingSequence& x, const std::vector<OverlapRegion>& regions,
    int k_prime) {
  const int n = static_cast<int>(similarity.rows());
  std::vector<OverlapAssignment> out;
  int n_clusters = 0;
  for (int l : labels) n_clusters = std::max(n_clusters, l + 1);
  if (n_clusters < 2) return out;

  for (int i = 0; i < n; ++i) {
    if (!segment_in_regions(x.segments[i], regions)) continue;
    std::vector<int> cand;
    for (int j = 0; j < n; ++j)
      if (j != i && labels[j] != labels[i]) cand.push_back(j);
    if (cand.empty()) continue;
    std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) {
      if (similarity(i, a) != similarity(i, b))
        return similarity(i, a) > similarity(i, b);
      return a < b;
    });
    const int take = std::min<int>(k_prime, static_cast<int>(cand.size()));
    std::map<int, std::pair<int, double>> votes;
    for (int r = 0; r < take; ++r) {
      auto& v = votes[labels[cand[r]]];
      v.first += 1;
      v.second += similarity(i, cand[r]);
    }
    int best = -1;
    for (const auto& [c, v] : votes) {
      if (best < 0) {
        best = c;
        continue;
      }
      const auto& b = votes[best];
      if (v.first > b.first ||
          (v.first == b.first && v.second > b.second) ||
          (v.first == b.first && v.second == b.second && c < best))
        best = c;
    }
    out.push_back({i, label_names[labels[i]], label_names[best]});
  }
  return out;
}

// Merge assignments into a hypothesis as secondary labels.
inline void apply_assignments(DiarizationHypothesis& hyp,
                              const std::vector<OverlapAssignment>& asg) {
  for (const auto& a : asg) {
    if (a.segment_index < 0 ||
        a.segment_index >= static_cast<int>(hyp.segments.size()))
      throw std::invalid_argument("apply_assignments: bad segment index");
    hyp.segments[a.segment_index].secondary = a.secondary;
  }
}

}  // namespace sharc

#endif  // SHARC_OVERLAP_HPP
