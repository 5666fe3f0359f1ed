// sharc/dataio.hpp
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

#ifndef SHARC_DATAIO_HPP
#define SHARC_DATAIO_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sharc/rng.hpp"

namespace sharc {

// Per-segment embedding with timing and an optional ground-truth speaker.
struct SegmentRecord {
  std::string recording_id;
  double onset = 0.0;
  double duration = 0.0;
  Eigen::VectorXd embedding;
  std::string speaker_label;  // empty when unlabeled
};

struct EmbeddingSequence {
  std::string recording_id;
  std::vector<SegmentRecord> segments;
  int dim = 0;

  int size() const { return static_cast<int>(segments.size()); }

  // Segment embeddings stacked as rows (N x D).
  Eigen::MatrixXd matrix() const {
    Eigen::MatrixXd m(segments.size(), dim);
    for (std::size_t i = 0; i < segments.size(); ++i)
      m.row(static_cast<Eigen::Index>(i)) = segments[i].embedding;
    return m;
  }

  bool fully_labeled() const {
    for (const auto& s : segments)
      if (s.speaker_label.empty()) return false;
    return !segments.empty();
  }
};

struct OverlapRegion {
  std::string recording_id;
  double onset = 0.0;
  double duration = 0.0;
};

// One diarized segment: primary speaker plus optional overlap speaker.
struct HypothesisSegment {
  double onset = 0.0;
  double duration = 0.0;
  std::string primary;
  std::string secondary;  // empty when the segment has a single speaker
};

struct DiarizationHypothesis {
  std::string recording_id;
  std::vector<HypothesisSegment> segments;
};

struct RttmTurn {
  std::string recording_id;
  double onset = 0.0;
  double duration = 0.0;
  std::string speaker;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Embedding files.
//
// Line 1:  #recording_id=<id> dim=<D>
// Then one segment per line:
//   onset<TAB>duration<TAB>speaker_or_-<TAB>v1 v2 ... vD
// ---------------------------------------------------------------------------

inline EmbeddingSequence read_embeddings(std::istream& is,
                                         const std::string& origin) {
  EmbeddingSequence seq;
  std::string line;
  if (!std::getline(is, line))
    throw FormatError(origin + ":1: empty file, expected header");
  {
    std::istringstream hs(line);
    std::string idfield, dimfield;
    hs >> idfield >> dimfield;
    if (idfield.rfind("#recording_id=", 0) != 0 ||
        dimfield.rfind("dim=", 0) != 0)
      throw FormatError(origin + ":1: malformed header: " + line);
    seq.recording_id = idfield.substr(14);
    try {
      seq.dim = std::stoi(dimfield.substr(4));
    } catch (const std::exception&) {
      throw FormatError(origin + ":1: malformed dim in header");
    }
    if (seq.recording_id.empty() || seq.dim < 1)
      throw FormatError(origin + ":1: malformed header: " + line);
  }
  int lineno = 1;
  double prev_onset = -std::numeric_limits<double>::infinity();
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    for (int f = 0; f < 3; ++f) {
      std::size_t tab = line.find('\t', pos);
      if (tab == std::string::npos)
        throw FormatError(origin + ":" + std::to_string(lineno) +
                          ": expected 4 tab-separated fields");
      fields.push_back(line.substr(pos, tab - pos));
      pos = tab + 1;
    }
    fields.push_back(line.substr(pos));

    SegmentRecord rec;
    rec.recording_id = seq.recording_id;
    try {
      rec.onset = std::stod(fields[0]);
      rec.duration = std::stod(fields[1]);
    } catch (const std::exception&) {
      throw FormatError(origin + ":" + std::to_string(lineno) +
                        ": malformed onset/duration");
    }
    if (rec.duration <= 0.0)
      throw FormatError(origin + ":" + std::to_string(lineno) +
                        ": duration must be positive");
    if (rec.onset < 0.0)
      throw FormatError(origin + ":" + std::to_string(lineno) +
                        ": onset must be non-negative");
    if (rec.onset < prev_onset)
      throw FormatError(origin + ":" + std::to_string(lineno) +
                        ": onsets must be non-decreasing");
    prev_onset = rec.onset;
    if (fields[2] != "-") rec.speaker_label = fields[2];

    std::istringstream vs(fields[3]);
    std::vector<double> vals;
    double v;
    while (vs >> v) vals.push_back(v);
    if (static_cast<int>(vals.size()) != seq.dim)
      throw FormatError(origin + ":" + std::to_string(lineno) +
                        ": dimension mismatch, expected " +
                        std::to_string(seq.dim) + " values, got " +
                        std::to_string(vals.size()));
    rec.embedding =
        Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<long>(vals.size()));
    seq.segments.push_back(std::move(rec));
  }
  if (seq.segments.empty()) throw FormatError(origin + ": no segments");
  return seq;
}

inline EmbeddingSequence read_embeddings(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  return read_embeddings(f, path);
}

inline void write_embeddings(const EmbeddingSequence& seq, std::ostream& os) {
  os << "#recording_id=" << seq.recording_id << " dim=" << seq.dim << "\n";
  char buf[64];
  for (const auto& s : seq.segments) {
    std::snprintf(buf, sizeof(buf), "%.17g", s.onset);
    os << buf << "\t";
    std::snprintf(buf, sizeof(buf), "%.17g", s.duration);
    os << buf << "\t" << (s.speaker_label.empty() ? "-" : s.speaker_label)
       << "\t";
    for (Eigen::Index i = 0; i < s.embedding.size(); ++i) {
      if (i) os << " ";
      std::snprintf(buf, sizeof(buf), "%.17g", s.embedding(i));
      os << buf;
    }
    os << "\n";
  }
}

inline void write_embeddings(const EmbeddingSequence& seq,
                             const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  write_embeddings(seq, f);
  f.flush();
  if (!f) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// RTTM.
// ---------------------------------------------------------------------------

// Turns for a hypothesis: primary labels over each segment span, secondary
// labels as additional turns over the same span. Adjacent (gap <= 1e-6 s) or
// overlapping same-speaker spans are merged into single turns.
inline std::vector<RttmTurn> hypothesis_turns(
    const DiarizationHypothesis& hyp) {
  constexpr double kGap = 1e-6;
  std::map<std::string, std::vector<std::pair<double, double>>> spans;
  for (const auto& s : hyp.segments) {
    if (s.duration <= 0.0)
      throw std::invalid_argument("hypothesis segment with non-positive "
                                  "duration");
    spans[s.primary].emplace_back(s.onset, s.onset + s.duration);
    if (!s.secondary.empty())
      spans[s.secondary].emplace_back(s.onset, s.onset + s.duration);
  }
  std::vector<RttmTurn> turns;
  for (auto& [spk, iv] : spans) {
    std::sort(iv.begin(), iv.end());
    std::size_t i = 0;
    while (i < iv.size()) {
      double b = iv[i].first, e = iv[i].second;
      std::size_t j = i + 1;
      while (j < iv.size() && iv[j].first <= e + kGap) {
        e = std::max(e, iv[j].second);
        ++j;
      }
      turns.push_back({hyp.recording_id, b, e - b, spk});
      i = j;
    }
  }
  std::sort(turns.begin(), turns.end(), [](const RttmTurn& a,
                                           const RttmTurn& b) {
    if (a.onset != b.onset) return a.onset < b.onset;
    return a.speaker < b.speaker;
  });
  return turns;
}

inline void write_rttm(const std::vector<RttmTurn>& turns, std::ostream& os) {
  char buf[64];
  for (const auto& t : turns) {
    os << "SPEAKER " << t.recording_id << " 1 ";
    std::snprintf(buf, sizeof(buf), "%.3f", t.onset);
    os << buf << " ";
    std::snprintf(buf, sizeof(buf), "%.3f", t.duration);
    os << buf << " <NA> <NA> " << t.speaker << " <NA> <NA>\n";
  }
}

inline void write_rttm(const DiarizationHypothesis& hyp, std::ostream& os) {
  write_rttm(hypothesis_turns(hyp), os);
}

inline void write_rttm(const DiarizationHypothesis& hyp,
                       const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  write_rttm(hyp, f);
  f.flush();
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline std::vector<RttmTurn> read_rttm(std::istream& is,
                                       const std::string& origin) {
  std::vector<RttmTurn> turns;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag, rec, chan, na1, na2, spk;
    double onset, dur;
    if (!(ls >> tag >> rec >> chan >> onset >> dur >> na1 >> na2 >> spk))
      throw FormatError(origin + ":" + std::to_string(lineno) +
                        ": malformed RTTM line");
    if (tag != "SPEAKER")
      throw FormatError(origin + ":" + std::to_string(lineno) +
                        ": expected SPEAKER record");
    turns.push_back({rec, onset, dur, spk});
  }
  return turns;
}

inline std::vector<RttmTurn> read_rttm(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  return read_rttm(f, path);
}

// ---------------------------------------------------------------------------
// Overlap-region files: <rec><TAB><onset><TAB><duration> per line.
// ---------------------------------------------------------------------------

inline void write_regions(const std::vector<OverlapRegion>& regions,
                          std::ostream& os) {
  char buf[64];
  for (const auto& r : regions) {
    os << r.recording_id << "\t";
    std::snprintf(buf, sizeof(buf), "%.17g", r.onset);
    os << buf << "\t";
    std::snprintf(buf, sizeof(buf), "%.17g", r.duration);
    os << buf << "\n";
  }
}

inline void write_regions(const std::vector<OverlapRegion>& regions,
                          const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  write_regions(regions, f);
}

inline std::vector<OverlapRegion> read_regions(std::istream& is,
                                               const std::string& origin) {
  std::vector<OverlapRegion> regions;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    OverlapRegion r;
    if (!(ls >> r.recording_id >> r.onset >> r.duration) || r.duration <= 0.0)
      throw FormatError(origin + ":" + std::to_string(lineno) +
                        ": malformed region line");
    regions.push_back(std::move(r));
  }
  return regions;
}

inline std::vector<OverlapRegion> read_regions(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  return read_regions(f, path);
}

// Sort and merge touching/overlapping regions of one recording.
inline std::vector<OverlapRegion> normalize_regions(
    std::vector<OverlapRegion> regions) {
  constexpr double kGap = 1e-9;
  std::sort(regions.begin(), regions.end(),
            [](const OverlapRegion& a, const OverlapRegion& b) {
              return a.onset < b.onset;
            });
  std::vector<OverlapRegion> out;
  for (const auto& r : regions) {
    if (!out.empty() && r.onset <= out.back().onset + out.back().duration + kGap) {
      double end = std::max(out.back().onset + out.back().duration,
                            r.onset + r.duration);
      out.back().duration = end - out.back().onset;
    } else {
      out.push_back(r);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic conversations.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int num_speakers = 2;
  int dim = 16;
  int segments_per_recording = 100;
  double within_class_std = 0.1;
  double between_class_std = 1.0;
  double overlap_fraction = 0.0;
  double turn_length_mean = 5.0;
  std::uint64_t seed = 1;
  std::string recording_id = "rec";
  double segment_length = 1.5;
  double segment_shift = 0.75;

  void validate() const {
    if (num_speakers < 1) throw std::invalid_argument("num_speakers >= 1");
    if (dim < 1) throw std::invalid_argument("dim >= 1");
    if (segments_per_recording < 1)
      throw std::invalid_argument("segments_per_recording >= 1");
    if (within_class_std <= 0.0 || between_class_std <= 0.0)
      throw std::invalid_argument("class stds must be positive");
    if (overlap_fraction < 0.0 || overlap_fraction >= 1.0)
      throw std::invalid_argument("overlap_fraction in [0,1)");
    if (overlap_fraction > 0.0 && num_speakers < 2)
      throw std::invalid_argument("overlap requires >= 2 speakers");
    if (turn_length_mean <= 0.0)
      throw std::invalid_argument("turn_length_mean > 0");
  }
};

struct SyntheticData {
  EmbeddingSequence seq;                 // primary labels on segments
  std::vector<OverlapRegion> regions;    // normalized
  std::vector<std::string> second_label; // per segment, "" when clean
  Eigen::MatrixXd centroids;             // num_speakers x dim

  // Ground-truth hypothesis (primary + secondary), e.g. for reference RTTM.
  DiarizationHypothesis reference() const {
    DiarizationHypothesis hyp;
    hyp.recording_id = seq.recording_id;
    for (std::size_t i = 0; i < seq.segments.size(); ++i) {
      const auto& s = seq.segments[i];
      hyp.segments.push_back(
          {s.onset, s.duration, s.speaker_label, second_label[i]});
    }
    return hyp;
  }
};

// Speaker centroids are drawn at scale between_class_std, segments at scale
// within_class_std around the active speaker's centroid. The speaker
// sequence follows geometric run lengths with the given mean. A deterministic
// round(f*N) subset of segments carries a second speaker; their embedding is
// the average of both speakers' draws and each contributes an overlap region
// of width segment_shift centred on the segment midpoint. Overlapped segments
// are chosen non-adjacent while possible so regions stay disjoint.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int K = spec.num_speakers;
  const int N = spec.segments_per_recording;
  const int D = spec.dim;

  SyntheticData data;
  data.centroids.resize(K, D);
  for (int k = 0; k < K; ++k)
    for (int d = 0; d < D; ++d)
      data.centroids(k, d) = rng.normal(0.0, spec.between_class_std);

  // Speaker per segment via geometric turns.
  std::vector<int> speaker(N);
  {
    int pos = 0;
    int cur = static_cast<int>(rng.uniform_index(K));
    while (pos < N) {
      int run = rng.run_length(spec.turn_length_mean);
      for (int i = 0; i < run && pos < N; ++i) speaker[pos++] = cur;
      if (K > 1) {
        int nxt = static_cast<int>(rng.uniform_index(K - 1));
        cur = nxt >= cur ? nxt + 1 : nxt;
      }
    }
  }

  auto draw = [&](int spk) {
    Eigen::VectorXd v(D);
    for (int d = 0; d < D; ++d)
      v(d) = data.centroids(spk, d) + rng.normal(0.0, spec.within_class_std);
    return v;
  };

  data.seq.recording_id = spec.recording_id;
  data.seq.dim = D;
  data.second_label.assign(N, "");
  for (int i = 0; i < N; ++i) {
    SegmentRecord rec;
    rec.recording_id = spec.recording_id;
    rec.onset = i * spec.segment_shift;
    rec.duration = spec.segment_length;
    rec.speaker_label = "spk" + std::to_string(speaker[i]);
    rec.embedding = draw(speaker[i]);
    data.seq.segments.push_back(std::move(rec));
  }

  // Overlapped segments: exact count, preferring non-adjacent picks.
  const int want = static_cast<int>(std::llround(spec.overlap_fraction * N));
  if (want > 0) {
    std::vector<int> order(N);
    for (int i = 0; i < N; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<char> chosen(N, 0);
    std::vector<int> picks;
    for (int pass = 0; pass < 2 && static_cast<int>(picks.size()) < want;
         ++pass) {
      for (int idx : order) {
        if (static_cast<int>(picks.size()) >= want) break;
        if (chosen[idx]) continue;
        const bool adjacent = (idx > 0 && chosen[idx - 1]) ||
                              (idx + 1 < N && chosen[idx + 1]);
        if (pass == 0 && adjacent) continue;
        chosen[idx] = 1;
        picks.push_back(idx);
      }
    }
    std::sort(picks.begin(), picks.end());
    for (int idx : picks) {
      int sec = static_cast<int>(rng.uniform_index(K - 1));
      if (sec >= speaker[idx]) ++sec;
      data.second_label[idx] = "spk" + std::to_string(sec);
      data.seq.segments[idx].embedding =
          0.5 * (data.seq.segments[idx].embedding + draw(sec));
      const double mid =
          data.seq.segments[idx].onset + 0.5 * spec.segment_length;
      data.regions.push_back({spec.recording_id, mid - 0.5 * spec.segment_shift,
                              spec.segment_shift});
    }
    data.regions = normalize_regions(std::move(data.regions));
  }
  return data;
}

// Midpoint rule: a segment counts as overlapped when its midpoint lies inside
// a region.
inline bool segment_in_regions(const SegmentRecord& seg,
                               const std::vector<OverlapRegion>& regions) {
  const double mid = seg.onset + 0.5 * seg.duration;
  for (const auto& r : regions) {
    if (r.recording_id != seg.recording_id) continue;
    if (mid >= r.onset && mid <= r.onset + r.duration) return true;
  }
  return false;
}

}  // namespace sharc

#endif  // SHARC_DATAIO_HPP
