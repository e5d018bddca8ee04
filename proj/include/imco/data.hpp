#pragma once

// Class-conditional feature data: generators, CSV I/O, session schedules and
// n-way k-shot episode sampling.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "imco/error.hpp"
#include "imco/random.hpp"
#include "imco/tensor.hpp"

namespace imco {

/// Samples grouped by class id. Every class has at least one row and all rows
/// share the same width.
struct ClassSet {
  std::map<int, Matrix> classes;
  Eigen::Index feature_dim = 0;

  std::size_t num_classes() const { return classes.size(); }

  std::vector<int> class_ids() const {
    std::vector<int> ids;
    for (const auto& [id, _] : classes) ids.push_back(id);
    return ids;
  }

  const Matrix& samples(int class_id) const {
    const auto it = classes.find(class_id);
    if (it == classes.end()) throw ConfigError("unknown class id " + std::to_string(class_id));
    return it->second;
  }

  bool contains(int class_id) const { return classes.count(class_id) != 0; }

  void validate() const {
    for (const auto& [id, m] : classes) {
      if (m.rows() < 1) throw ConfigError("class " + std::to_string(id) + " has no samples");
      if (m.cols() != feature_dim) throw ShapeError("class " + std::to_string(id) + " has the wrong feature width");
    }
  }

  bool operator==(const ClassSet& other) const {
    if (feature_dim != other.feature_dim || classes.size() != other.classes.size()) return false;
    for (const auto& [id, m] : classes) {
      const auto it = other.classes.find(id);
      if (it == other.classes.end() || it->second.rows() != m.rows() || it->second != m) return false;
    }
    return true;
  }
};

/// Isotropic Gaussian blobs. Class c has a center drawn uniformly from
/// [-center_scale, center_scale]^dim and samples N(center, spread^2 I).
inline ClassSet make_blob_classes(int num_classes, int dim, int samples_per_class, double center_scale,
                                  double spread, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("need at least two classes");
  if (dim < 2) throw ConfigError("need at least two feature dimensions");
  if (samples_per_class < 1) throw ConfigError("need at least one sample per class");
  if (!(spread > 0.0)) throw ConfigError("spread must be positive");
  if (center_scale < 0.0) throw ConfigError("center scale must be non-negative");
  Rng rng(seed);
  ClassSet out;
  out.feature_dim = dim;
  for (int c = 0; c < num_classes; ++c) {
    Vector center(dim);
    for (int d = 0; d < dim; ++d) center[d] = rng.uniform(-center_scale, center_scale);
    Matrix m(samples_per_class, dim);
    for (int i = 0; i < samples_per_class; ++i)
      for (int d = 0; d < dim; ++d) m(i, d) = center[d] + rng.normal(0.0, spread);
    out.classes.emplace(c, std::move(m));
  }
  return out;
}

struct TrainTestSplit {
  ClassSet train;
  ClassSet test;
};

/// Per-class seeded split. Classes with two or more rows keep at least one
/// row on each side.
inline TrainTestSplit split_train_test(const ClassSet& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  Rng rng(seed);
  TrainTestSplit s;
  s.train.feature_dim = s.test.feature_dim = data.feature_dim;
  for (const auto& [id, m] : data.classes) {
    const auto n = static_cast<std::size_t>(m.rows());
    if (n < 2) throw ConfigError("class " + std::to_string(id) + " needs two samples to split");
    auto n_train = static_cast<std::size_t>(train_fraction * static_cast<double>(n));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    const auto order = rng.choose(n, n);
    Matrix tr(static_cast<Eigen::Index>(n_train), m.cols());
    Matrix te(static_cast<Eigen::Index>(n - n_train), m.cols());
    for (std::size_t i = 0; i < n; ++i) {
      const auto src = static_cast<Eigen::Index>(order[i]);
      if (i < n_train)
        tr.row(static_cast<Eigen::Index>(i)) = m.row(src);
      else
        te.row(static_cast<Eigen::Index>(i - n_train)) = m.row(src);
    }
    s.train.classes.emplace(id, std::move(tr));
    s.test.classes.emplace(id, std::move(te));
  }
  return s;
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <class T>
bool parse_number(std::string_view text, T& value) {
  text = trim(text);
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  return ec == std::errc() && ptr == text.data() + text.size() && !text.empty();
}

inline std::string format_real(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
  return std::string(buf, ptr);
}

}  // namespace detail

/// Reads `label,f0,...,f{D-1}` CSV: one header line, then one sample per line.
inline ClassSet load_dataset_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset " + path.string());
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  ++line_no;
  const auto header = detail::split_fields(detail::trim(line));
  if (header.size() < 2 || detail::trim(header[0]) != "label")
    throw ParseError("header must start with 'label' followed by feature names", line_no);
  const auto dim = static_cast<Eigen::Index>(header.size() - 1);

  std::map<int, std::vector<std::vector<double>>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto fields = detail::split_fields(body);
    if (static_cast<Eigen::Index>(fields.size()) != dim + 1)
      throw ParseError("expected " + std::to_string(dim + 1) + " fields, found " + std::to_string(fields.size()),
                       line_no);
    int label = 0;
    if (!detail::parse_number(fields[0], label)) throw ParseError("label is not an integer", line_no);
    std::vector<double> feats(static_cast<std::size_t>(dim));
    for (Eigen::Index d = 0; d < dim; ++d)
      if (!detail::parse_number(fields[static_cast<std::size_t>(d + 1)], feats[static_cast<std::size_t>(d)]))
        throw ParseError("feature " + std::to_string(d) + " is not a number", line_no);
    rows[label].push_back(std::move(feats));
  }
  ClassSet out;
  out.feature_dim = dim;
  for (auto& [label, samples] : rows) {
    Matrix m(static_cast<Eigen::Index>(samples.size()), dim);
    for (std::size_t i = 0; i < samples.size(); ++i)
      for (Eigen::Index d = 0; d < dim; ++d) m(static_cast<Eigen::Index>(i), d) = samples[i][static_cast<std::size_t>(d)];
    out.classes.emplace(label, std::move(m));
  }
  return out;
}

inline void save_dataset_csv(const ClassSet& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset " + path.string());
  out << "label";
  for (Eigen::Index d = 0; d < data.feature_dim; ++d) out << ",f" << d;
  out << '\n';
  for (const auto& [id, m] : data.classes) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      out << id;
      for (Eigen::Index d = 0; d < m.cols(); ++d) out << ',' << detail::format_real(m(i, d));
      out << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path.string());
}

/// Base classes followed by equally sized few-shot sessions.
struct SessionSchedule {
  std::vector<int> base_classes;
  std::vector<std::vector<int>> sessions;
  int shots_per_class = 0;

  std::size_t session_count() const { return sessions.size(); }

  /// Classes introduced at session t, where session 0 is the base task.
  const std::vector<int>& classes_of(std::size_t t) const { return t == 0 ? base_classes : sessions.at(t - 1); }

  /// Every class seen up to and including session t, in introduction order.
  std::vector<int> seen_through(std::size_t t) const {
    std::vector<int> out = base_classes;
    for (std::size_t s = 1; s <= t && s <= sessions.size(); ++s)
      out.insert(out.end(), sessions[s - 1].begin(), sessions[s - 1].end());
    return out;
  }
};

inline SessionSchedule build_schedule(std::vector<int> class_ids, int base_count, int session_size, int shots,
                                      std::uint64_t seed) {
  {
    std::set<int> unique(class_ids.begin(), class_ids.end());
    if (unique.size() != class_ids.size()) throw ConfigError("class ids must be unique");
  }
  if (base_count < 1 || session_size < 1 || shots < 1) throw ConfigError("schedule sizes must be positive");
  const int total = static_cast<int>(class_ids.size());
  const int remaining = total - base_count;
  if (remaining < session_size || remaining % session_size != 0)
    throw ConfigError(std::to_string(remaining) + " non-base classes do not split into sessions of " +
                      std::to_string(session_size));
  Rng rng(seed);
  rng.shuffle(class_ids);
  SessionSchedule s;
  s.shots_per_class = shots;
  s.base_classes.assign(class_ids.begin(), class_ids.begin() + base_count);
  for (int start = base_count; start < total; start += session_size)
    s.sessions.emplace_back(class_ids.begin() + start, class_ids.begin() + start + session_size);
  return s;
}

/// Where an episode row came from in the source ClassSet.
struct SampleRef {
  int class_id = 0;
  Eigen::Index row = 0;
  bool operator<(const SampleRef& o) const { return class_id != o.class_id ? class_id < o.class_id : row < o.row; }
  bool operator==(const SampleRef& o) const { return class_id == o.class_id && row == o.row; }
};

/// n-way k-shot task. Labels are episode-local, 0..n-1; `class_ids[l]` is the
/// source class of local label l. Rows are grouped by class.
struct Episode {
  Batch support;
  Batch query;
  int way = 0;
  int shot = 0;
  int query_per_class = 0;
  std::vector<int> class_ids;
  std::vector<SampleRef> support_refs;
  std::vector<SampleRef> query_refs;
};

inline Episode sample_episode(const ClassSet& data, int n, int k, int q, Rng& rng) {
  if (n < 1 || k < 1 || q < 0) throw ConfigError("episode sizes must be positive");
  if (static_cast<int>(data.num_classes()) < n)
    throw SamplingError("episode needs " + std::to_string(n) + " classes, data has " +
                        std::to_string(data.num_classes()));
  const auto ids = data.class_ids();
  const auto picked = rng.choose(ids.size(), static_cast<std::size_t>(n));
  Episode ep;
  ep.way = n;
  ep.shot = k;
  ep.query_per_class = q;
  ep.support.inputs.resize(n * k, data.feature_dim);
  ep.query.inputs.resize(n * q, data.feature_dim);
  for (int local = 0; local < n; ++local) {
    const int cid = ids[picked[static_cast<std::size_t>(local)]];
    const Matrix& m = data.samples(cid);
    if (m.rows() < k + q)
      throw SamplingError("class " + std::to_string(cid) + " has " + std::to_string(m.rows()) +
                          " samples, episode needs " + std::to_string(k + q));
    ep.class_ids.push_back(cid);
    const auto rows = rng.choose(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(k + q));
    for (int j = 0; j < k + q; ++j) {
      const auto src = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(j)]);
      if (j < k) {
        ep.support.inputs.row(local * k + j) = m.row(src);
        ep.support.labels.push_back(local);
        ep.support_refs.push_back({cid, src});
      } else {
        ep.query.inputs.row(local * q + (j - k)) = m.row(src);
        ep.query.labels.push_back(local);
        ep.query_refs.push_back({cid, src});
      }
    }
  }
  return ep;
}

/// Stacks the given classes into one batch labeled by position in `class_ids`.
inline Batch stack_classes(const ClassSet& data, const std::vector<int>& class_ids) {
  Eigen::Index rows = 0;
  for (int c : class_ids) rows += data.samples(c).rows();
  Batch b;
  b.inputs.resize(rows, data.feature_dim);
  Eigen::Index r = 0;
  for (std::size_t label = 0; label < class_ids.size(); ++label) {
    const Matrix& m = data.samples(class_ids[label]);
    b.inputs.middleRows(r, m.rows()) = m;
    b.labels.insert(b.labels.end(), static_cast<std::size_t>(m.rows()), static_cast<int>(label));
    r += m.rows();
  }
  return b;
}

}  // namespace imco
