// sharc/similarity.hpp
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

#ifndef SHARC_SIMILARITY_HPP
#define SHARC_SIMILARITY_HPP

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sharc/dataio.hpp"
#include "sharc/serialize.hpp"

namespace sharc {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct ScoreMatrix {
  enum class Kind { raw, unit_interval };
  Mat values;
  Kind kind = Kind::raw;

  int size() const { return static_cast<int>(values.rows()); }

  void validate() const {
    if (values.rows() != values.cols())
      throw std::invalid_argument("score matrix must be square");
    const double asym = (values - values.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-9)
      throw std::invalid_argument("score matrix asymmetric by " +
                                  std::to_string(asym));
    if (kind == Kind::unit_interval &&
        (values.minCoeff() < 0.0 || values.maxCoeff() > 1.0))
      throw std::invalid_argument("unit-interval scores out of [0,1]");
  }
};

// s' = 1 / (1 + exp(-s / alpha)), entrywise. Order-preserving.
inline ScoreMatrix sigmoid_transform(const ScoreMatrix& s, double alpha) {
  if (alpha <= 0.0) throw std::invalid_argument("sigmoid alpha must be > 0");
  ScoreMatrix out;
  out.values = (1.0 + (-s.values.array() / alpha).exp()).inverse().matrix();
  out.kind = ScoreMatrix::Kind::unit_interval;
  return out;
}

inline double score_cosine(const Vec& a, const Vec& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine: dimension mismatch");
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("cosine: zero vector");
  return a.dot(b) / (na * nb);
}

// For each node, the min(k, N-1) neighbors with the highest similarity, self
// excluded, ties broken toward the lower index. N = 1 yields no edges.
inline std::vector<std::vector<int>> knn_edges(const ScoreMatrix& s, int k) {
  if (k < 1) throw std::invalid_argument("knn_edges: k must be >= 1");
  const int n = s.size();
  const int kk = std::min(k, n - 1);
  std::vector<std::vector<int>> out(n);
  if (kk <= 0) return out;
  std::vector<int> idx;
  for (int i = 0; i < n; ++i) {
    idx.clear();
    for (int j = 0; j < n; ++j)
      if (j != i) idx.push_back(j);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
      if (s.values(i, a) != s.values(i, b))
        return s.values(i, a) > s.values(i, b);
      return a < b;
    });
    out[i].assign(idx.begin(), idx.begin() + kk);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Two-covariance PLDA.
//
// Fitting estimates, in the whitened + length-normalized space, the between-
// and within-class covariances from class-mean statistics. Per recording,
// preprocess() whitens, length-normalizes and projects onto a recording-level
// PCA of dimension min(30, N-1, D); the class covariances are carried through
// the projection and simultaneously diagonalized, so scoring reduces to a
// closed form with a diagonal between variance (psi) and unit within
// variance.
// ---------------------------------------------------------------------------

struct PldaModel {
  Vec mean;          // D
  Mat whitener;      // D x D, y = whitener^T (x - mean)
  Mat between_cov;   // D x D, stats in whitened + normalized space
  Mat within_cov;    // D x D

  // Recording-adapted part, filled by preprocess().
  Mat pca_basis;     // D x d projection (PCA folded with the diagonalizer)
  Vec rec_mean;      // recording mean in whitened space (d-side input space)
  Vec between_var;   // d
  Vec within_var;    // d
  bool pca_skipped = false;

  int dim() const { return static_cast<int>(mean.size()); }
  bool adapted() const { return between_var.size() > 0; }
};

namespace detail {

inline Mat symmetrize(const Mat& a) { return 0.5 * (a + a.transpose()); }

// Eigen-decomposition of a symmetric matrix with eigenvalues clamped below.
inline void sym_eig(const Mat& a, Vec& evals, Mat& evecs, double floor_val) {
  Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(a));
  if (es.info() != Eigen::Success)
    throw std::runtime_error("eigendecomposition failed");
  evals = es.eigenvalues().cwiseMax(floor_val);
  evecs = es.eigenvectors();
}

inline Vec whiten_lnorm(const PldaModel& m, const Vec& x) {
  Vec y = m.whitener.transpose() * (x - m.mean);
  const double n = y.norm();
  if (n > 0.0) y /= n;
  return y;
}

}  // namespace detail

// Estimate mean, whitener and class covariances from labeled recordings.
// Classes are (recording, speaker) pairs.
inline PldaModel fit_plda(const std::vector<EmbeddingSequence>& data) {
  std::vector<Vec> xs;
  std::vector<std::string> cls;
  for (const auto& seq : data) {
    for (const auto& s : seq.segments) {
      if (s.speaker_label.empty())
        throw std::invalid_argument("fit_plda: unlabeled segment in " +
                                    seq.recording_id);
      xs.push_back(s.embedding);
      cls.push_back(seq.recording_id + "\t" + s.speaker_label);
    }
  }
  if (xs.empty()) throw std::invalid_argument("fit_plda: no data");
  const int D = static_cast<int>(xs[0].size());
  const double N = static_cast<double>(xs.size());

  PldaModel m;
  m.mean = Vec::Zero(D);
  for (const auto& x : xs) m.mean += x;
  m.mean /= N;

  Mat total = Mat::Zero(D, D);
  for (const auto& x : xs) {
    Vec c = x - m.mean;
    total += c * c.transpose();
  }
  total /= N;

  Vec evals;
  Mat evecs;
  detail::sym_eig(total, evals, evecs, 1e-10);
  m.whitener = evecs * evals.cwiseSqrt().cwiseInverse().asDiagonal();

  // Class statistics in the whitened + normalized space.
  std::map<std::string, std::pair<Vec, int>> classes;
  std::vector<Vec> ys(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    ys[i] = detail::whiten_lnorm(m, xs[i]);
    auto it = classes.find(cls[i]);
    if (it == classes.end())
      classes.emplace(cls[i], std::make_pair(ys[i], 1));
    else {
      it->second.first += ys[i];
      ++it->second.second;
    }
  }
  Vec gmean = Vec::Zero(D);
  for (const auto& y : ys) gmean += y;
  gmean /= N;

  Mat between = Mat::Zero(D, D);
  Mat within = Mat::Zero(D, D);
  for (auto& [name, stat] : classes) {
    Vec cm = stat.first / double(stat.second);
    Vec d = cm - gmean;
    between += double(stat.second) * (d * d.transpose());
  }
  between /= N;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const auto& stat = classes.at(cls[i]);
    Vec d = ys[i] - stat.first / double(stat.second);
    within += d * d.transpose();
  }
  within /= N;

  m.between_cov = detail::symmetrize(between);
  m.within_cov = detail::symmetrize(within);
  return m;
}

struct PreprocessResult {
  Mat processed;     // N x d
  PldaModel model;   // adapted copy
  bool pca_skipped = false;
  int out_dim = 0;
};

// Whiten, length-normalize and project each vector; adapt the class
// covariances into the projected, simultaneously-diagonalized space. With
// N < 2 the PCA step is skipped (flagged) and the diagonal of the global
// covariances is used for scoring.
inline PreprocessResult preprocess(const EmbeddingSequence& x,
                                   const PldaModel& model) {
  if (x.dim != model.dim())
    throw std::invalid_argument("preprocess: dimension mismatch");
  const int n = x.size();
  const int D = model.dim();

  Mat y(n, D);
  for (int i = 0; i < n; ++i)
    y.row(i) = detail::whiten_lnorm(model, x.segments[i].embedding).transpose();

  PreprocessResult res;
  res.model = model;

  if (n < 2) {
    res.pca_skipped = true;
    res.model.pca_skipped = true;
    res.model.pca_basis = Mat::Identity(D, D);
    res.model.rec_mean = Vec::Zero(D);
    res.model.between_var = model.between_cov.diagonal().cwiseMax(0.0);
    res.model.within_var = model.within_cov.diagonal().cwiseMax(1e-10);
    res.processed = y;
    res.out_dim = D;
    return res;
  }

  const int d = std::min({30, n - 1, D});
  Vec rmean = y.colwise().mean().transpose();
  Mat centered = y.rowwise() - rmean.transpose();
  Mat cov = centered.transpose() * centered / double(n);

  Vec evals;
  Mat evecs;
  detail::sym_eig(cov, evals, evecs, 0.0);
  // Columns sorted by descending eigenvalue, deterministic sign.
  Mat pca(D, d);
  for (int j = 0; j < d; ++j) {
    Vec col = evecs.col(D - 1 - j);
    int arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col(arg) < 0.0) col = -col;
    pca.col(j) = col;
  }

  // Carry class covariances through the PCA, then diagonalize within and
  // between simultaneously: V^T Sw V = I, V^T Sb V = diag(psi).
  Mat sw = pca.transpose() * model.within_cov * pca;
  Mat sb = pca.transpose() * model.between_cov * pca;
  Vec wvals;
  Mat wvecs;
  detail::sym_eig(sw, wvals, wvecs, 1e-10);
  Mat w1 = wvecs * wvals.cwiseSqrt().cwiseInverse().asDiagonal();
  Mat b = w1.transpose() * sb * w1;
  Vec bvals;
  Mat bvecs;
  detail::sym_eig(b, bvals, bvecs, 0.0);
  Mat v = w1 * bvecs;

  res.model.pca_basis = pca * v;           // D x d combined projection
  res.model.rec_mean = rmean;
  res.model.between_var = bvals.cwiseMax(0.0);
  res.model.within_var = Vec::Ones(d);
  res.model.pca_skipped = false;
  res.processed = centered * res.model.pca_basis;
  res.out_dim = d;
  return res;
}

// Two-covariance log-likelihood ratio for a pair of processed vectors:
// same-class vs different-class Gaussian hypotheses with diagonal between
// variance psi and within variance w.
inline double score_plda(const Vec& a, const Vec& b, const PldaModel& model) {
  if (!model.adapted())
    throw std::invalid_argument("score_plda: model not adapted (run "
                                "preprocess first)");
  if (a.size() != b.size() || a.size() != model.between_var.size())
    throw std::invalid_argument("score_plda: dimension mismatch");
  double llr = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double psi = model.between_var(i);
    const double w = std::max(model.within_var(i), 1e-10);
    const double av = psi + w;    // marginal variance
    const double c = psi;         // cross covariance under same-class
    const double det_same = av * av - c * c;
    const double y1 = a(i), y2 = b(i);
    const double q_same = (av * (y1 * y1 + y2 * y2) - 2.0 * c * y1 * y2) /
                          det_same;
    const double q_diff = (y1 * y1 + y2 * y2) / av;
    llr += -0.5 * (q_same - q_diff) - 0.5 * std::log(det_same / (av * av));
  }
  return llr;
}

// ---------------------------------------------------------------------------
// Serialization (round-trip exact).
// ---------------------------------------------------------------------------

inline blob::Blob plda_to_blob(const PldaModel& m) {
  blob::Blob b;
  b.kind = "plda";
  b.matrices["mean"] = m.mean;
  b.matrices["whitener"] = m.whitener;
  b.matrices["between_cov"] = m.between_cov;
  b.matrices["within_cov"] = m.within_cov;
  if (m.adapted()) {
    b.matrices["pca_basis"] = m.pca_basis;
    b.matrices["rec_mean"] = m.rec_mean;
    b.matrices["between_var"] = m.between_var;
    b.matrices["within_var"] = m.within_var;
    b.scalars["pca_skipped"] = m.pca_skipped ? 1.0 : 0.0;
  }
  return b;
}

inline PldaModel plda_from_blob(const blob::Blob& b) {
  if (b.kind != "plda")
    throw std::runtime_error("expected plda blob, got kind=" + b.kind);
  PldaModel m;
  m.mean = b.matrix("mean").col(0);
  m.whitener = b.matrix("whitener");
  m.between_cov = b.matrix("between_cov");
  m.within_cov = b.matrix("within_cov");
  const int D = m.dim();
  if (m.whitener.rows() != D || m.whitener.cols() != D ||
      m.between_cov.rows() != D || m.within_cov.rows() != D)
    throw std::runtime_error("plda blob: inconsistent shapes");
  if (b.matrices.count("pca_basis")) {
    m.pca_basis = b.matrix("pca_basis");
    m.rec_mean = b.matrix("rec_mean").col(0);
    m.between_var = b.matrix("between_var").col(0);
    m.within_var = b.matrix("within_var").col(0);
    m.pca_skipped = b.scalar_or("pca_skipped", 0.0) != 0.0;
  }
  return m;
}

}  // namespace sharc

#endif  // SHARC_SIMILARITY_HPP
